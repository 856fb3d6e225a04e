use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2};
use nullsample_nn::init::Init;
use nullsample_nn::layers::{Activation, Dense, Layer, Sequential};
use nullsample_nn::{zero_grad, RAdam};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, DataError, LabelledDataset, RawDataset, Result, Split};
use crate::cvae::ReconLoss;

/// Width of the continuous embedding the tabular models work in.
pub const EMBED_WIDTH: usize = 35;

const CONTINUOUS: [&str; 6] = ["age", "fnlwgt", "education-num", "capital-gain", "capital-loss", "hours-per-week"];
const CATEGORICAL: [&str; 7] =
    ["workclass", "education", "marital-status", "occupation", "relationship", "race", "native-country"];
/// Column positions in the raw file.
const CONTINUOUS_COLUMNS: [usize; 6] = [0, 2, 4, 10, 11, 12];
const CATEGORICAL_COLUMNS: [usize; 7] = [1, 3, 5, 6, 7, 8, 13];
const SEX_COLUMN: usize = 9;
const INCOME_COLUMN: usize = 14;

/// One census record. The sensitive attribute (sex) is kept apart from the
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct AdultRecord {
    pub continuous: [f64; 6],
    pub categorical: [String; 7],
    pub male: bool,
    pub high_income: bool,
}

impl AdultRecord {
    /// Parses one comma-separated row. Returns `Ok(None)` for rows with a
    /// missing (`?`) field.
    pub fn parse(fields: &[&str]) -> Result<Option<Self>> {
        let malformed = |detail: String| DataError::Malformed { what: "adult record".into(), detail };
        if fields.len() != 15 {
            return Err(malformed(format!("expected 15 fields, got {}", fields.len())));
        }
        if fields.contains(&"?") {
            return Ok(None);
        }
        let mut continuous = [0.0; 6];
        for (slot, &col) in continuous.iter_mut().zip(&CONTINUOUS_COLUMNS) {
            *slot = fields[col].parse().map_err(|_| malformed(format!("bad number `{}`", fields[col])))?;
        }
        let categorical = CATEGORICAL_COLUMNS.map(|c| fields[c].to_string());
        let male = match fields[SEX_COLUMN] {
            "Male" => true,
            "Female" => false,
            other => return Err(malformed(format!("bad sex `{other}`"))),
        };
        let high_income = match fields[INCOME_COLUMN].trim_end_matches('.') {
            ">50K" => true,
            "<=50K" => false,
            other => return Err(malformed(format!("bad income `{other}`"))),
        };
        Ok(Some(Self { continuous, categorical, male, high_income }))
    }
}

/// Complete records of one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdultTable {
    pub records: Vec<AdultRecord>,
    /// Rows skipped because a field was missing.
    pub dropped: usize,
}

impl AdultTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'|'))
            .from_reader(text.as_bytes());
        let mut table = Self::default();
        for row in reader.records() {
            let row = row.map_err(|e| DataError::Malformed { what: "adult file".into(), detail: e.to_string() })?;
            if row.iter().all(str::is_empty) {
                continue;
            }
            let fields: Vec<&str> = row.iter().collect();
            match AdultRecord::parse(&fields)? {
                Some(r) => table.records.push(r),
                None => table.dropped += 1,
            }
        }
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Training and test files of a cached raw dataset.
    pub fn load(raw: &RawDataset) -> Result<(Self, Self)> {
        Ok((Self::read(&raw.path("adult.data"))?, Self::read(&raw.path("adult.test"))?))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn concat(mut self, other: Self) -> Self {
        self.records.extend(other.records);
        self.dropped += other.dropped;
        self
    }
}

/// Standardisation statistics and categorical levels, fitted on one table and
/// applied unchanged to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub levels: Vec<Vec<String>>,
}

impl FeatureSchema {
    pub fn fit(table: &AdultTable) -> Self {
        let n = table.len().max(1) as f64;
        let mut mean = vec![0.0; CONTINUOUS.len()];
        let mut sq = vec![0.0; CONTINUOUS.len()];
        for r in &table.records {
            for (j, &v) in r.continuous.iter().enumerate() {
                mean[j] += v / n;
                sq[j] += v * v / n;
            }
        }
        let std = mean.iter().zip(&sq).map(|(m, q)| (q - m * m).max(0.0).sqrt().max(1e-12)).collect();
        let levels = (0..CATEGORICAL.len())
            .map(|j| {
                let set: BTreeSet<&str> = table.records.iter().map(|r| r.categorical[j].as_str()).collect();
                set.into_iter().map(String::from).collect()
            })
            .collect();
        Self { mean, std, levels }
    }

    pub fn width(&self) -> usize {
        self.mean.len() + self.levels.iter().map(Vec::len).sum::<usize>()
    }

    /// `(start, len)` of each one-hot group; continuous columns come first.
    pub fn categorical_groups(&self) -> Vec<(usize, usize)> {
        let mut start = self.mean.len();
        self.levels
            .iter()
            .map(|l| {
                let group = (start, l.len());
                start += l.len();
                group
            })
            .collect()
    }

    /// Standardised continuous columns followed by one-hot groups.
    pub fn encode(&self, table: &AdultTable) -> Result<Array2<f64>> {
        let groups = self.categorical_groups();
        let mut x = Array2::zeros((table.len(), self.width()));
        let mut unknown = BTreeSet::new();
        for (i, r) in table.records.iter().enumerate() {
            for (j, &v) in r.continuous.iter().enumerate() {
                x[[i, j]] = (v - self.mean[j]) / self.std[j];
            }
            for (j, value) in r.categorical.iter().enumerate() {
                match self.levels[j].binary_search(value) {
                    Ok(k) => x[[i, groups[j].0 + k]] = 1.0,
                    Err(_) => {
                        unknown.insert(format!("{}={value}", CATEGORICAL[j]));
                    }
                }
            }
        }
        if !unknown.is_empty() {
            return Err(DataError::UnknownLevel(unknown.into_iter().collect::<Vec<_>>().join(", ")));
        }
        Ok(x)
    }

    /// Encoded features with `s` = sex (male 1) and `y` = income above 50K.
    pub fn to_dataset(&self, table: &AdultTable, split: Split) -> Result<LabelledDataset> {
        let x = self.encode(table)?;
        let d = x.ncols();
        let s = table.records.iter().map(|r| r.male as usize).collect();
        let y = table.records.iter().map(|r| r.high_income as usize).collect();
        Ok(LabelledDataset::new(x, [d, 1, 1], s, Some(y), split))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreEmbedOptions {
    pub width: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PreEmbedOptions {
    fn default() -> Self {
        Self { width: EMBED_WIDTH, hidden: 64, epochs: 5, batch_size: 128, lr: 1e-3, seed: 0 }
    }
}

/// Autoencoder mapping mixed one-hot / continuous features to a dense
/// continuous code that a flow can model.
#[derive(Debug, Clone)]
pub struct PreEmbedder {
    encoder: Sequential,
    decoder: Sequential,
    recon: ReconLoss,
    pub final_loss: f64,
}

impl PreEmbedder {
    pub fn fit(x: ArrayView2<f64>, categorical: Vec<(usize, usize)>, options: &PreEmbedOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let d = x.ncols();
        let (h, w) = (options.hidden, options.width);
        let mut encoder = Sequential::new(vec![
            Layer::Dense(Dense::new(d, h, Init::FanInUniform, &mut rng)),
            Layer::Act(Activation::Relu),
            Layer::Dense(Dense::new(h, w, Init::FanInUniform, &mut rng)),
        ]);
        let mut decoder = Sequential::new(vec![
            Layer::Dense(Dense::new(w, h, Init::FanInUniform, &mut rng)),
            Layer::Act(Activation::Relu),
            Layer::Dense(Dense::new(h, d, Init::FanInUniform, &mut rng)),
        ]);
        let recon = ReconLoss::Mixed { categorical };
        let (mut opt_enc, mut opt_dec) = (RAdam::new(options.lr), RAdam::new(options.lr));
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        let mut final_loss = f64::NAN;
        for epoch in 0..options.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0, 0);
            for chunk in order.chunks(options.batch_size.max(1)) {
                let batch = x.select(Axis(0), chunk);
                zero_grad(&mut encoder);
                zero_grad(&mut decoder);
                let (code, enc_tape) = encoder.forward_train(batch.clone().into_dyn());
                let (out, dec_tape) = decoder.forward_train(code);
                let out = out.into_dimensionality::<Ix2>().expect("decoder emits rows");
                let (loss, grad) = recon.evaluate(out.view(), batch.view());
                let dcode = decoder.backward(dec_tape, grad.into_dyn());
                encoder.backward(enc_tape, dcode);
                opt_enc.step(&mut encoder);
                opt_dec.step(&mut decoder);
                total += loss;
                batches += 1;
            }
            final_loss = total / batches.max(1) as f64;
            log::debug!("pre-embed epoch {epoch}: loss {final_loss:.4}");
        }
        Self { encoder, decoder, recon, final_loss }
    }

    pub fn width(&self) -> usize {
        match self.encoder.layers.last() {
            Some(Layer::Dense(d)) => d.output_dim(),
            _ => unreachable!("encoder ends in a dense layer"),
        }
    }

    pub fn embed(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.run(&self.encoder, x)
    }

    pub fn reconstruct(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let code = self.embed(x);
        self.run(&self.decoder, code.view())
    }

    /// Mean reconstruction loss on `x`.
    pub fn loss(&self, x: ArrayView2<f64>) -> f64 {
        self.recon.evaluate(self.reconstruct(x).view(), x).0
    }

    fn run(&self, net: &Sequential, x: ArrayView2<f64>) -> Array2<f64> {
        let input: ArrayD<f64> = x.to_owned().into_dyn();
        net.forward(&input).into_dimensionality::<Ix2>().expect("dense net emits rows")
    }
}

/// Fits a [`PreEmbedder`] on `fit_on` and replaces the features of every
/// dataset in `targets` with their embedding.
pub fn pre_embed(
    fit_on: &LabelledDataset,
    categorical: Vec<(usize, usize)>,
    targets: &mut [&mut LabelledDataset],
    options: &PreEmbedOptions,
) -> PreEmbedder {
    let embedder = PreEmbedder::fit(fit_on.x.view(), categorical, options);
    for dataset in targets.iter_mut() {
        dataset.x = embedder.embed(dataset.x.view());
        dataset.shape = [embedder.width(), 1, 1];
    }
    embedder
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    const SAMPLE: &str = "|1x3 Cross validator\n\
        39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K\n\
        50, Self-emp-not-inc, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Female, 0, 0, 13, United-States, >50K.\n\
        18, ?, 103497, Some-college, 10, Never-married, ?, Own-child, White, Female, 0, 0, 30, United-States, <=50K.\n\
        \n";

    #[test]
    fn parses_and_drops_missing_rows() {
        let t = AdultTable::parse(SAMPLE).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dropped, 1);
        assert!(t.records[0].male && !t.records[0].high_income);
        assert!(!t.records[1].male && t.records[1].high_income);
    }

    #[test]
    fn encoding_layout_and_unknown_levels() {
        let t = AdultTable::parse(SAMPLE).unwrap();
        let schema = FeatureSchema::fit(&t);
        let x = schema.encode(&t).unwrap();
        assert_eq!(x.ncols(), schema.width());
        for (start, len) in schema.categorical_groups() {
            for row in x.rows() {
                assert_eq!(row.slice(s![start..start + len]).sum(), 1.0);
            }
        }
        let mut other = t.clone();
        other.records[0].categorical[0] = "Never-worked".into();
        assert!(matches!(schema.encode(&other), Err(DataError::UnknownLevel(l)) if l.contains("Never-worked")));
    }

    #[test]
    fn embedder_reduces_width() {
        let t = AdultTable::parse(SAMPLE).unwrap();
        let schema = FeatureSchema::fit(&t);
        let x = schema.encode(&t).unwrap();
        let opts = PreEmbedOptions { width: 4, epochs: 2, batch_size: 2, ..Default::default() };
        let e = PreEmbedder::fit(x.view(), schema.categorical_groups(), &opts);
        assert_eq!(e.embed(x.view()).dim(), (2, 4));
        assert!(e.final_loss.is_finite());
    }
}
