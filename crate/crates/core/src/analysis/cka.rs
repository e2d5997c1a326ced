use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{gemm, Scalar, Tensor};
use crate::vit::Model;

fn centered(x: &Tensor<impl Scalar>) -> Result<(Vec<f64>, usize, usize)> {
    if x.ndim() != 2 {
        return Err(Error::dim(format!("CKA features must be 2-D, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut v = x.to_f64_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| v[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            v[i * d + j] -= mean;
        }
    }
    Ok((v, n, d))
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA `‖YᵀX‖²_F / (‖XᵀX‖_F·‖YᵀY‖_F)` on column-centered features
/// `[samples, d]`. All-zero centered features give 0.
pub fn linear_cka<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (cx, n, dx) = centered(x)?;
    let (cy, ny, dy) = centered(y)?;
    if n != ny {
        return Err(Error::dim(format!("CKA sample counts differ: {n} and {ny}")));
    }
    if n < 2 {
        return Err(Error::contract("CKA needs at least two samples"));
    }
    let mut yx = vec![0.0; dy * dx];
    gemm(&cy, true, &cx, false, &mut yx, dy, n, dx, false);
    let mut xx = vec![0.0; dx * dx];
    gemm(&cx, true, &cx, false, &mut xx, dx, n, dx, false);
    let mut yy = vec![0.0; dy * dy];
    gemm(&cy, true, &cy, false, &mut yy, dy, n, dy, false);
    let den = frob_sq(&xx).sqrt() * frob_sq(&yy).sqrt();
    if den == 0.0 {
        log::warn!("linear CKA of constant features; returning 0");
        return Ok(0.0);
    }
    Ok(frob_sq(&yx) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    /// `values[i][j]` compares layer `rows[i]` of model A with layer
    /// `cols[j]` of model B.
    pub values: Vec<Vec<f64>>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

/// Post-block residual features `[batch·tokens, dim]` for every block.
pub fn block_features<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::with_frozen(model.store.ids().collect());
    let mut rng = rng::stream(0, streams::DROP_PATH);
    let trace = model.forward_trace(&mut tape, images, false, &mut rng)?;
    trace
        .block_outputs
        .iter()
        .map(|&v| {
            let t = tape.value(v).clone();
            let d = t.last_dim();
            let rows = t.len() / d;
            t.reshape(vec![rows, d])
        })
        .collect()
}

/// Pairwise linear CKA between every block of `a` and every block of `b`.
pub fn cka_matrix<T: Scalar>(a: &Model<T>, b: &Model<T>, probe: &Tensor<T>) -> Result<CkaMatrix> {
    let fa = block_features(a, probe)?;
    let fb = block_features(b, probe)?;
    let values = fa
        .iter()
        .map(|x| fb.iter().map(|y| linear_cka(x, y)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaMatrix {
        values,
        rows: (0..fa.len()).collect(),
        cols: (0..fb.len()).collect(),
    })
}
