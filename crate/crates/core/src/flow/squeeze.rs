use ndarray::{Array4, ArrayView4};

/// Space-to-depth reshaping by a factor of two: each 2x2 spatial patch of a
/// channel becomes four consecutive channels (`c * 4 + dh * 2 + dw`).
pub fn squeeze(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let reshaped = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c, h / 2, 2, w / 2, 2))
        .expect("even spatial dims");
    reshaped
        .permuted_axes([0, 1, 3, 5, 2, 4])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * 4, h / 2, w / 2))
        .expect("contiguous")
}

pub fn unsqueeze(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, c4, h, w) = x.dim();
    let c = c4 / 4;
    let reshaped = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c, 2, 2, h, w))
        .expect("channel count divisible by four");
    reshaped
        .permuted_axes([0, 1, 4, 2, 5, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c, h * 2, w * 2))
        .expect("contiguous")
}
