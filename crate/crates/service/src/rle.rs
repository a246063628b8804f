use promptseg::backbone::BinaryMask;
use serde::{Deserialize, Serialize};

/// Row-major run-length encoding. `counts` alternates background and
/// foreground runs and always starts with a (possibly zero) background run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

impl RleMask {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &v in &mask.data {
            let v = v != 0;
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            height: mask.height,
            width: mask.width,
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask, String> {
        let n = self.height * self.width;
        if self.counts.iter().sum::<usize>() != n {
            return Err(format!(
                "run lengths sum to {}, expected {}x{} = {n}",
                self.counts.iter().sum::<usize>(),
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(n);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(u8::from(i % 2 == 1), c));
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = BinaryMask::from_fn(5, 7, |y, x| (x + y) % 3 == 0 || x == 6);
        let rle = RleMask::encode(&m);
        assert_eq!(rle.counts.iter().sum::<usize>(), 35);
        assert_eq!(rle.decode().unwrap(), m);
    }

    #[test]
    fn leading_foreground_has_zero_background_run() {
        let m = BinaryMask::from_fn(1, 3, |_, x| x == 0);
        assert_eq!(RleMask::encode(&m).counts, vec![0, 1, 2]);
        assert_eq!(RleMask::encode(&BinaryMask::zeros(2, 2)).counts, vec![4]);
    }

    #[test]
    fn bad_total_is_rejected() {
        let rle = RleMask {
            height: 2,
            width: 2,
            counts: vec![1, 1],
        };
        assert!(rle.decode().is_err());
    }
}
