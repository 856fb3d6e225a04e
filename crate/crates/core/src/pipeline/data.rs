use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DatasetKind, ExperimentConfig};
use super::Result;
use crate::data::{
    build_cmnist, load_dataset, make_representative, pre_embed, prepare_celeba_subset, split_biased, AdultTable,
    DatasetName, FeatureSchema, Fetcher, HttpFetcher, LabelledDataset, MirrorFetcher, MnistRaw, PreEmbedder, Split,
};

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Split,
    Encoder,
    Adversary,
    Training,
    Downstream,
    Probe,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64 + 1);
    rng
}

/// All splits of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// Encoder training data: `s` labels only.
    pub representative: LabelledDataset,
    pub train: LabelledDataset,
    pub test: LabelledDataset,
    /// Untransformed features where the flow input differs from them
    /// (pre-embedded tabular data).
    pub raw: Option<RawSplits>,
    pub embedder: Option<PreEmbedder>,
}

/// Standardised continuous and one-hot categorical features.
#[derive(Debug, Clone)]
pub struct RawSplits {
    pub representative: LabelledDataset,
    pub train: LabelledDataset,
    pub test: LabelledDataset,
    /// `(start, len)` of each one-hot group.
    pub categorical: Vec<(usize, usize)>,
}

impl ExperimentData {
    /// Representative, train and test sets in the original feature space.
    pub fn raw_splits(&self) -> (&LabelledDataset, &LabelledDataset, &LabelledDataset) {
        match &self.raw {
            Some(r) => (&r.representative, &r.train, &r.test),
            None => (&self.representative, &self.train, &self.test),
        }
    }
}

fn fetcher(config: &ExperimentConfig) -> Box<dyn Fetcher> {
    match &config.mirror_dir {
        Some(dir) => Box::new(MirrorFetcher::new(dir)),
        None => Box::new(HttpFetcher),
    }
}

/// Loads (fetching and caching if needed) and splits the configured dataset.
///
/// The representative set never depends on the mixing factor, so runs that
/// differ only in `eta` train identical encoders.
pub fn prepare_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let fetcher = fetcher(config);
    let mut data_rng = stream_rng(config.seed, Stream::Data);
    let mut split_rng = stream_rng(config.seed, Stream::Split);
    match config.dataset {
        DatasetKind::Cmnist => {
            let raw = load_dataset(DatasetName::Mnist, &config.cache_dir, fetcher.as_ref())?;
            let mnist = MnistRaw::load(&raw.dir)?;
            let spec = crate::data::CmnistSpec { sigma: config.sigma, ..config.cmnist.clone() };
            let splits = build_cmnist(&mnist, &spec, &mut data_rng)?;
            Ok(ExperimentData {
                representative: splits.representative,
                train: splits.train,
                test: splits.test,
                raw: None,
                embedder: None,
            })
        }
        DatasetKind::Adult => {
            let raw = load_dataset(DatasetName::Adult, &config.cache_dir, fetcher.as_ref())?;
            let (train_table, test_table) = AdultTable::load(&raw)?;
            let pool_table = train_table.concat(test_table);
            let schema = FeatureSchema::fit(&pool_table);
            let pool = schema.to_dataset(&pool_table, Split::Pool)?;
            let (representative, rest) =
                make_representative(&pool, config.adult.representative_fraction, &mut data_rng)?;
            let (raw_train, raw_test) = split_biased(&rest, config.eta, &mut split_rng)?;
            let raw = RawSplits {
                representative: representative.clone(),
                train: raw_train.clone(),
                test: raw_test.clone(),
                categorical: schema.categorical_groups(),
            };
            let (mut representative, mut train, mut test) = (representative, raw_train, raw_test);
            let options = crate::data::PreEmbedOptions { seed: config.seed, ..config.adult.pre_embed.clone() };
            let embedder = pre_embed(
                &raw.representative,
                raw.categorical.clone(),
                &mut [&mut representative, &mut train, &mut test],
                &options,
            );
            Ok(ExperimentData { representative, train, test, raw: Some(raw), embedder: Some(embedder) })
        }
        DatasetKind::Celeba => {
            let raw = load_dataset(DatasetName::Celeba, &config.cache_dir, fetcher.as_ref())?;
            let o = &config.celeba;
            let subset = prepare_celeba_subset(&raw, &o.sensitive, &o.target, o.count, o.side, &mut data_rng)?;
            let (representative, rest) =
                make_representative(&subset.dataset, o.representative_fraction, &mut data_rng)?;
            let (train, test) = split_biased(&rest, config.eta, &mut split_rng)?;
            Ok(ExperimentData { representative, train, test, raw: None, embedder: None })
        }
    }
}
