//! Fully connected network with rectified-linear hidden layers and a
//! hand-written backward pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Parameters are stored flat: for each layer `k`, the `dims[k+1] x dims[k]`
/// weight matrix (row-major) followed by its `dims[k+1]` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass; `inputs[k]` feeds layer `k`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    /// He-uniform weights for every layer, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut mlp.params[off..off + fan_in * fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(mlp)
    }

    pub fn from_parts(dims: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        validate_dims(&dims)?;
        if params.len() != param_count(&dims) {
            return Err(Error::shape(format!(
                "layer shapes {dims:?} need {} parameters, got {}",
                param_count(&dims),
                params.len()
            )));
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer(&self, k: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let off: usize = self.dims[..=k].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let (fan_in, fan_out) = (self.dims[k], self.dims[k + 1]);
        let w = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out]).unwrap();
        let b = ArrayView1::from(&self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
        (w, b)
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Returns the raw output (no activation on the last layer) and the cache
    /// needed by [`Mlp::backward`].
    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.input_width() {
            return Err(Error::shape(format!(
                "network expects {} input features, got {}",
                self.input_width(),
                x.ncols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers());
        let mut a = x.to_owned();
        for k in 0..self.layers() {
            let (w, b) = self.layer(k);
            let mut z = a.dot(&w.t());
            z += &b;
            inputs.push(a);
            if k + 1 < self.layers() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok((a, MlpCache { inputs }))
    }

    /// Gradient of the parameters (same flat layout) and of the input, given
    /// the gradient of the raw output.
    pub fn backward(&self, cache: &MlpCache, d_out: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let mut dz = d_out.to_owned();
        for k in (0..self.layers()).rev() {
            let off: usize = self.dims[..=k].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            let (fan_in, fan_out) = (self.dims[k], self.dims[k + 1]);
            let a = &cache.inputs[k];
            let dw = dz.t().dot(a);
            let db: Array1<f64> = dz.sum_axis(Axis(0));
            grads[off..off + fan_in * fan_out].copy_from_slice(dw.as_slice().unwrap());
            grads[off + fan_in * fan_out..off + fan_in * fan_out + fan_out].copy_from_slice(db.as_slice().unwrap());
            let (w, _) = self.layer(k);
            let mut da = dz.dot(&w);
            if k > 0 {
                ndarray::Zip::from(&mut da).and(a).for_each(|g, &act| {
                    if act <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            dz = da;
        }
        (grads, dz)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::invalid(format!("invalid layer shapes {dims:?}")));
    }
    Ok(())
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backpropagates `d_probs` through a row-wise softmax with outputs `probs`.
pub fn softmax_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.rows().into_iter().zip(d_probs.rows()).zip(out.rows_mut()) {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for j in 0..p.len() {
            o[j] = p[j] * (g[j] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shapes_and_counts() {
        assert_eq!(param_count(&[7, 64, 64, 3]), 7 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3);
        assert!(Mlp::zeros(&[3]).is_err());
        assert!(Mlp::zeros(&[3, 0, 2]).is_err());
        assert!(Mlp::from_parts(vec![2, 2], vec![0.0; 5]).is_err());
        let m = Mlp::init(&[4, 5, 2], 1).unwrap();
        assert!(m.forward(Array2::zeros((3, 3)).view()).is_err());
        assert_eq!(m.forward(Array2::zeros((3, 4)).view()).unwrap().dim(), (3, 2));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&array![[10.0, 0.0, 0.0], [0.0, 0.0, 0.0], [-800.0, 800.0, 1.0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(p[[0, 0]] > 0.9999 && p[[0, 1]] < 1e-4);
        assert!((p[[1, 2]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = Mlp::init(&[3, 6, 4, 2], 9).unwrap();
        let x = array![[0.3, -1.2, 0.8], [1.5, 0.1, -0.4], [-0.7, 0.9, 0.2]];
        // Scalar objective: sum of output * fixed coefficients.
        let coef = array![[1.0, -0.5], [0.25, 2.0], [-1.5, 0.75]];
        let objective = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()).unwrap() * &coef).sum();
        let (_, cache) = m.forward_cached(x.view()).unwrap();
        let (g, dx) = m.backward(&cache, coef.view());
        let h = 1e-6;
        for p in 0..m.params().len() {
            let mut plus = m.clone();
            plus.params_mut()[p] += h;
            let mut minus = m.clone();
            minus.params_mut()[p] -= h;
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
            assert!(
                (fd - g[p]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {p}: {fd} vs {}",
                g[p]
            );
        }
        for i in 0..3 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (objective(&m, &xp) - objective(&m, &xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
