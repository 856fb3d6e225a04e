use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Result};

/// Mean 8-bit RGB colour of each digit class.
pub const COLOUR_TABLE: [[u8; 3]; 10] = [
    [0, 255, 255],
    [0, 0, 255],
    [255, 0, 255],
    [0, 128, 0],
    [0, 255, 0],
    [128, 0, 0],
    [0, 0, 128],
    [128, 0, 128],
    [255, 0, 0],
    [255, 255, 0],
];

/// [`COLOUR_TABLE`] scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColourTable(pub [[f64; 3]; 10]);

impl Default for ColourTable {
    fn default() -> Self {
        Self(COLOUR_TABLE.map(|rgb| rgb.map(|c| c as f64 / 255.0)))
    }
}

impl ColourTable {
    pub fn mean(&self, class: usize) -> [f64; 3] {
        self.0[class]
    }
}

/// Tints single-channel images (`[N, H*W]`, values in `[0, 1]`) with one RGB
/// colour per image drawn from `N(mean, sigma^2 I)` and clamped to `[0, 1]`.
///
/// In biased mode the mean is the colour of the image's own label; otherwise
/// a colour class is drawn uniformly. Returns `[N, 3*H*W]` images laid out
/// channel-first, and the colour class used for each image.
pub fn colorize<R: Rng + ?Sized>(
    gray: ArrayView2<f64>,
    labels: &[usize],
    sigma: f64,
    biased: bool,
    rng: &mut R,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(DataError::NegativeSigma(sigma));
    }
    let (n, pixels) = gray.dim();
    let table = ColourTable::default();
    let noise = Normal::new(0.0, sigma).expect("validated sigma");
    let mut out = Array2::zeros((n, 3 * pixels));
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let class = if biased { labels[i] % 10 } else { rng.random_range(0..10) };
        classes.push(class);
        let mean = table.mean(class);
        let rgb: [f64; 3] =
            std::array::from_fn(|c| if sigma > 0.0 { (mean[c] + noise.sample(rng)).clamp(0.0, 1.0) } else { mean[c] });
        for (c, &value) in rgb.iter().enumerate() {
            for p in 0..pixels {
                out[[i, c * pixels + p]] = gray[[i, p]] * value;
            }
        }
    }
    Ok((out, classes))
}

/// Channel mean of `[N, C*H*W]` images, giving `[N, H*W]`.
pub fn grayscale(images: ArrayView2<f64>, channels: usize) -> Array2<f64> {
    let (n, d) = images.dim();
    let pixels = d / channels;
    Array2::from_shape_fn((n, pixels), |(i, p)| {
        (0..channels).map(|c| images[[i, c * pixels + p]]).sum::<f64>() / channels as f64
    })
}
