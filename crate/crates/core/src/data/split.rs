use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DatasetSplit<T = LabeledImage> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub ratio: f64,
}

/// Shuffled index partition: `floor(n * ratio)` indices go to train.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDataset("cannot split an empty list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0,1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * ratio + 1e-9).floor() as usize;
    let val = idx.split_off(n_train.min(n));
    Ok((idx, val))
}

pub fn split_dataset<T>(items: Vec<T>, ratio: f64, seed: u64) -> Result<DatasetSplit<T>> {
    let (train_idx, val_idx) = split_indices(items.len(), ratio, seed)?;
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<T> {
        ids.iter()
            .map(|&i| slots[i].take().expect("indices form a partition"))
            .collect()
    };
    let train = take(&train_idx);
    let val = take(&val_idx);
    Ok(DatasetSplit { train, val, ratio })
}
