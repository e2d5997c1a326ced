use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Scalar;

/// Stochastic depth on a residual branch `[batch, ...]`.
///
/// While training, each sample's branch is kept with probability `1 − p`
/// and rescaled by `1 / (1 − p)`, or zeroed. Inference and `p = 0` return
/// the branch untouched without drawing from `rng`.
pub fn drop_path<T: Scalar>(
    tape: &mut Tape<T>,
    branch: Var,
    p: f64,
    training: bool,
    rng: &mut SeededRng,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!("drop path probability {p} outside [0, 1]")));
    }
    if !training || p == 0.0 {
        return Ok(branch);
    }
    let batch = tape.shape(branch)[0];
    let keep = 1.0 - p;
    let factors = (0..batch)
        .map(|_| {
            if keep > 0.0 && rng.random::<f64>() < keep {
                T::from_f64(1.0 / keep)
            } else {
                T::zero()
            }
        })
        .collect();
    tape.scale_rows(branch, factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, streams};
    use crate::tensor::Tensor;

    #[test]
    fn identity_cases() {
        let mut rng = stream(0, streams::DROP_PATH);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        assert_eq!(drop_path(&mut tape, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(drop_path(&mut tape, x, 0.7, false, &mut rng).unwrap(), x);
        let dropped = drop_path(&mut tape, x, 1.0, true, &mut rng).unwrap();
        assert!(tape.value(dropped).data().iter().all(|&v| v == 0.0));
        assert!(matches!(drop_path(&mut tape, x, 1.5, true, &mut rng), Err(Error::Contract(_))));
        assert!(drop_path(&mut tape, x, -0.1, false, &mut rng).is_err());
    }

    #[test]
    fn samples_are_rescaled_whole() {
        let mut rng = stream(3, streams::DROP_PATH);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![64, 4]));
        let y = drop_path(&mut tape, x, 0.5, true, &mut rng).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert!(row.iter().all(|&v| v == row[0]));
            assert!(row[0] == 0.0 || row[0] == 2.0);
        }
    }
}
