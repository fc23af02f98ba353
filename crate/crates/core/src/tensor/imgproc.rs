//! Non-differentiable image utilities: median filtering, order-statistic
//! quantiles, and deterministic top-fraction binarization. These never touch
//! a tape.

use super::Tensor;
use crate::error::{Error, Result};

/// Median filter over k x k neighborhoods with edge-replicated borders.
/// Input must be rank 2; k must be odd.
pub fn median_blur(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "median_blur expects rank 2, got {:?}",
            x.shape()
        )));
    }
    if k % 2 == 0 || k == 0 {
        return Err(Error::Parameter(format!("median_blur kernel must be odd, got {k}")));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let r = (k / 2) as isize;
    let data = x.data();
    let mut out = vec![0.0; h * w];
    let mut window = Vec::with_capacity(k * k);
    for y in 0..h as isize {
        for xx in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let cy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let cx = (xx + dx).clamp(0, w as isize - 1) as usize;
                    window.push(data[cy * w + cx]);
                }
            }
            window.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[(y * w as isize + xx) as usize] = window[(k * k) / 2];
        }
    }
    Tensor::from_vec(out, x.shape())
}

/// Order-statistic quantile: the ceil(q*N)-th smallest element, with q = 0
/// mapping to the minimum. No interpolation; ties resolve by value.
pub fn quantile(values: &Tensor, q: f64) -> Result<f64> {
    if values.numel() == 0 {
        return Err(Error::Parameter("quantile of empty input".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Parameter(format!("quantile fraction {q} outside [0, 1]")));
    }
    let n = values.numel();
    let mut sorted = values.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q * n as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

/// Binarize to exactly the top `ceil(N) - ceil((1-cr)*N)` values. This is
/// quantile thresholding with a deterministic (value, index) tie-break, so
/// the configured cover rate survives heavily tied inputs.
pub fn binarize_top_fraction(x: &Tensor, cover_rate: f64) -> Result<Tensor> {
    if !(0.0 < cover_rate && cover_rate < 1.0) {
        return Err(Error::Parameter(format!("cover rate {cover_rate} outside (0, 1)")));
    }
    let n = x.numel();
    let keep = n - (((1.0 - cover_rate) * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        x.data()[b]
            .partial_cmp(&x.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; n];
    for &i in order.iter().take(keep) {
        out[i] = 1.0;
    }
    Tensor::from_vec(out, x.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    /// Sort-based reference used by the examples.
    fn median_oracle(data: &[f64], h: usize, w: usize, y: isize, x: isize, k: isize) -> f64 {
        let mut vals = Vec::new();
        for dy in -(k / 2)..=(k / 2) {
            for dx in -(k / 2)..=(k / 2) {
                let cy = (y + dy).clamp(0, h as isize - 1) as usize;
                let cx = (x + dx).clamp(0, w as isize - 1) as usize;
                vals.push(data[cy * w + cx]);
            }
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[vals.len() / 2]
    }

    #[test]
    fn median_constant_unchanged() {
        let x = Tensor::full(&[4, 4], 0.6);
        let y = median_blur(&x, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn median_kills_interior_impulse() {
        let mut data = vec![0.0; 25];
        data[12] = 1.0;
        let y = median_blur(&t(&data, &[5, 5]), 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn median_center_of_1_to_9() {
        let x = t(&(1..=9).map(|v| v as f64).collect::<Vec<_>>(), &[3, 3]);
        let y = median_blur(&x, 3).unwrap();
        assert_eq!(y.data()[4], 5.0);
        assert_eq!(y.data()[4], median_oracle(x.data(), 3, 3, 1, 1, 3));
    }

    #[test]
    fn median_even_k_rejected() {
        assert!(matches!(
            median_blur(&Tensor::zeros(&[3, 3]), 2),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn quantile_examples() {
        // ceil(0.75 * 4) = 3rd smallest
        let x = t(&[0.1, 0.2, 0.3, 0.4], &[4]);
        assert_eq!(quantile(&x, 0.75).unwrap(), 0.3);
        // q = 1 is the maximum, q = 0 the minimum
        let x = t(&[5.0, -1.0, 3.0], &[3]);
        assert_eq!(quantile(&x, 1.0).unwrap(), 5.0);
        assert_eq!(quantile(&x, 0.0).unwrap(), -1.0);
        // all-equal input returns that value at every q
        let x = Tensor::full(&[6], 0.42);
        for q in [0.0, 0.3, 0.77, 1.0] {
            assert_eq!(quantile(&x, q).unwrap(), 0.42);
        }
        assert!(quantile(&Tensor::zeros(&[0]), 0.5).is_err());
    }

    #[test]
    fn binarize_exact_count_under_ties() {
        // 100 identical values: the quantile threshold alone would zero all
        // of them; the deterministic tie-break keeps the count exact.
        let x = Tensor::full(&[10, 10], 1.0);
        let b = binarize_top_fraction(&x, 0.1).unwrap();
        let ones: f64 = b.data().iter().sum();
        assert_eq!(ones, 10.0);
    }

    #[test]
    fn binarize_matches_quantile_on_distinct_values() {
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.7919).sin()).collect();
        let x = t(&data, &[8, 8]);
        let cr = 0.25;
        let b = binarize_top_fraction(&x, cr).unwrap();
        let thr = quantile(&x, 1.0 - cr).unwrap();
        for (v, m) in data.iter().zip(b.data()) {
            assert_eq!(*m == 1.0, *v > thr, "value {v} vs threshold {thr}");
        }
    }
}
