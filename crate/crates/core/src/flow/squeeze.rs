//! 2x2 space-to-depth. Output channel `4c + 2dy + dx` holds input channel `c`
//! at offset `(dy, dx)` of every 2x2 block.

use crate::error::{shape_err, Result};

pub fn squeeze_shape(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, c, h, w] if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 => Ok([b, 4 * c, h / 2, w / 2]),
        [_, _, h, w] if h > 0 && w > 0 => Err(shape_err(format!("cannot squeeze odd spatial dims {h}x{w}"))),
        _ => Err(shape_err(format!("cannot squeeze shape {shape:?}"))),
    }
}

pub fn unsqueeze_shape(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, c, h, w] if c % 4 == 0 => Ok([b, c / 4, h * 2, w * 2]),
        _ => Err(shape_err(format!("cannot unsqueeze shape {shape:?}"))),
    }
}

/// Works on any element type so the same code serves floats and integer
/// latents.
pub fn squeeze<T: Copy + Default>(x: &[T], shape: &[usize]) -> Result<(Vec<T>, [usize; 4])> {
    let out_shape = squeeze_shape(shape)?;
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::default(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let o = ci * 4 + (y % 2) * 2 + (xx % 2);
                    out[((bi * 4 * c + o) * h2 + y / 2) * w2 + xx / 2] = x[((bi * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    Ok((out, out_shape))
}

pub fn unsqueeze<T: Copy + Default>(x: &[T], shape: &[usize]) -> Result<(Vec<T>, [usize; 4])> {
    let out_shape = unsqueeze_shape(shape)?;
    let (b, c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::default(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let o = ci * 4 + (y % 2) * 2 + (xx % 2);
                    out[((bi * c + ci) * h + y) * w + xx] = x[((bi * 4 * c + o) * h2 + y / 2) * w2 + xx / 2];
                }
            }
        }
    }
    Ok((out, out_shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_block_becomes_four_channels() {
        let (y, s) = squeeze(&[1, 2, 3, 4], &[1, 1, 2, 2]).unwrap();
        assert_eq!(s, [1, 4, 1, 1]);
        assert_eq!(y, vec![1, 2, 3, 4]);
    }

    #[test]
    fn odd_dims_are_rejected() {
        assert!(squeeze(&[0i32; 6], &[1, 1, 3, 2]).is_err());
        assert!(unsqueeze(&[0i32; 6], &[1, 6, 1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn unsqueeze_inverts_squeeze(b in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let shape = [b, c, 2 * h, 2 * w];
            let n: usize = shape.iter().product();
            let x: Vec<i64> = (0..n as u64).map(|i| (i.wrapping_mul(seed | 1) >> 7) as i64).collect();
            let (y, s) = squeeze(&x, &shape).unwrap();
            let (z, s2) = unsqueeze(&y, &s).unwrap();
            prop_assert_eq!(s2, shape);
            prop_assert_eq!(&z, &x);
            let mut a = x.clone();
            let mut bb = y.clone();
            a.sort();
            bb.sort();
            prop_assert_eq!(a, bb);
        }
    }
}
