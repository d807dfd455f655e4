/// Whether `small` can be expanded to `big`: right-aligned, every dimension
/// of `small` equals the matching one of `big` or is 1.
pub fn broadcast_shapes_compatible(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len()
        && small
            .iter()
            .rev()
            .zip(big.iter().rev())
            .all(|(&s, &b)| s == b || s == 1)
}

/// Maps a flat index of the expanded shape back to the source tensor.
#[derive(Clone, Debug)]
pub(crate) enum BroadcastMap {
    Identity,
    /// Source matches a suffix of the target; index is `i % len`.
    Suffix(usize),
    General {
        out_shape: Vec<usize>,
        in_shape: Vec<usize>,
    },
}

impl BroadcastMap {
    pub(crate) fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        let in_len: usize = in_shape.iter().product();
        let trimmed: Vec<usize> = {
            let first = in_shape.iter().position(|&d| d != 1).unwrap_or(in_shape.len());
            in_shape[first..].to_vec()
        };
        if out_shape == in_shape {
            BroadcastMap::Identity
        } else if out_shape.ends_with(&trimmed) {
            BroadcastMap::Suffix(in_len)
        } else {
            BroadcastMap::General {
                out_shape: out_shape.to_vec(),
                in_shape: in_shape.to_vec(),
            }
        }
    }

    #[inline]
    pub(crate) fn map(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Suffix(n) => i % n,
            BroadcastMap::General {
                out_shape,
                in_shape,
            } => {
                let mut rem = i;
                let mut idx = 0;
                let mut stride = 1;
                let offset = out_shape.len() - in_shape.len();
                for d in (0..out_shape.len()).rev() {
                    let coord = rem % out_shape[d];
                    rem /= out_shape[d];
                    if d >= offset {
                        let ind = in_shape[d - offset];
                        if ind != 1 {
                            idx += coord * stride;
                        }
                        stride *= ind;
                    }
                }
                idx
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compatible_shapes() {
        assert!(broadcast_shapes_compatible(&[4, 3], &[3]));
        assert!(broadcast_shapes_compatible(&[4, 3], &[4, 1]));
        assert!(broadcast_shapes_compatible(&[2, 4, 3], &[1, 3]));
        assert!(!broadcast_shapes_compatible(&[4, 3], &[4]));
        assert!(!broadcast_shapes_compatible(&[3], &[2, 3]));
    }

    #[test]
    fn column_expansion_maps_rows() {
        let m = BroadcastMap::new(&[2, 3], &[2, 1]);
        let got: Vec<usize> = (0..6).map(|i| m.map(i)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn suffix_maps_modulo() {
        let m = BroadcastMap::new(&[2, 3], &[3]);
        assert!(matches!(m, BroadcastMap::Suffix(3)));
        let got: Vec<usize> = (0..6).map(|i| m.map(i)).collect();
        assert_eq!(got, vec![0, 1, 2, 0, 1, 2]);
    }
}
