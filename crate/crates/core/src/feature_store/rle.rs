//! Run-length coding of binary masks: alternating run lengths over the
//! row-major pixel order, starting with a (possibly empty) run of zeros.

use ndarray::Array2;

pub fn encode(mask: &Array2<bool>) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &v in mask.iter() {
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

/// Decodes runs into an `height x width` mask. Returns `None` when the runs do not
/// cover exactly `width * height` pixels.
pub fn decode(runs: &[u32], width: usize, height: usize) -> Option<Array2<bool>> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (width * height) as u64 {
        return None;
    }
    let mut data = Vec::with_capacity(width * height);
    for (i, &r) in runs.iter().enumerate() {
        data.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    Array2::from_shape_vec((height, width), data).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn leading_one_gets_empty_zero_run() {
        let m = Array2::from_shape_vec((1, 3), vec![true, true, false]).unwrap();
        assert_eq!(encode(&m), vec![0, 2, 1]);
    }

    #[test]
    fn bad_total_rejected() {
        assert!(decode(&[1, 2], 2, 2).is_none());
    }

    proptest! {
        #[test]
        fn round_trip(bits in proptest::collection::vec(any::<bool>(), 1..200), w in 1usize..20) {
            let h = bits.len() / w;
            prop_assume!(h > 0);
            let m = Array2::from_shape_vec((h, w), bits[..h * w].to_vec()).unwrap();
            prop_assert_eq!(decode(&encode(&m), w, h).unwrap(), m);
        }
    }
}
