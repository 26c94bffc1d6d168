//! Multilayer perceptrons, SGD with momentum and weight decay, and binary
//! checkpoints.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, NodeId, Tape};

const MAGIC: &[u8; 8] = b"LTKDMLP\0";
const FORMAT_VERSION: u32 = 1;

/// Fully connected ReLU network with linear output logits.
///
/// Parameters are stored flat as `[W0, b0, W1, b1, ...]`; `Wk` is
/// `dims[k] × dims[k+1]` and `bk` is `1 × dims[k+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<Matrix>,
}

/// Parameter and output nodes of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub params: Vec<NodeId>,
    pub logits: NodeId,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Config(format!("invalid layer dims {dims:?}")));
    }
    Ok(())
}

impl Mlp {
    /// He-initialized weights (`N(0, 2/fan_in)`), zero biases.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        check_dims(dims)?;
        let mut params = Vec::with_capacity(2 * (dims.len() - 1));
        for w in dims.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            params.push(Matrix::from_fn(w[0], w[1], |_, _| {
                std * rng.sample::<f64, _>(StandardNormal)
            }));
            params.push(Matrix::zeros(1, w[1]));
        }
        Ok(Self { dims: dims.to_vec(), params })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let params = dims
            .windows(2)
            .flat_map(|w| [Matrix::zeros(w[0], w[1]), Matrix::zeros(1, w[1])])
            .collect();
        Ok(Self { dims: dims.to_vec(), params })
    }

    pub fn from_params(dims: &[usize], params: Vec<Matrix>) -> Result<Self> {
        check_dims(dims)?;
        let expected: Vec<(usize, usize)> = dims
            .windows(2)
            .flat_map(|w| [(w[0], w[1]), (1, w[1])])
            .collect();
        let got: Vec<(usize, usize)> = params.iter().map(Matrix::shape).collect();
        if expected != got {
            return Err(Error::shape(format!("parameter shapes {got:?}, expected {expected:?}")));
        }
        Ok(Self { dims: dims.to_vec(), params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    /// `Σ (d_in + 1) · d_out`.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    /// Hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dims.hash(&mut h);
        for p in &self.params {
            for v in p.as_slice() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let n_layers = self.params.len() / 2;
        let mut h = x.clone();
        for k in 0..n_layers {
            h = h.matmul(&self.params[2 * k])?.add_row_bias(&self.params[2 * k + 1])?;
            if k + 1 < n_layers {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Forward pass recorded on `tape`, parameters as leaves.
    pub fn record(&self, tape: &mut Tape, x: &Matrix) -> Result<Recorded> {
        self.check_input(x)?;
        let params: Vec<NodeId> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let n_layers = params.len() / 2;
        let mut h = tape.constant(x.clone());
        for k in 0..n_layers {
            let lin = tape.matmul(h, params[2 * k])?;
            h = tape.add_bias(lin, params[2 * k + 1])?;
            if k + 1 < n_layers {
                h = tape.relu(h);
            }
        }
        Ok(Recorded { params, logits: h })
    }

    /// Runs `loss` on the logits of `x` and backpropagates its logit gradient
    /// to every parameter. `loss` returns `(value, ∂value/∂logits)`.
    pub fn loss_and_grads(
        &self,
        x: &Matrix,
        loss: impl FnOnce(&Matrix) -> Result<(f64, Matrix)>,
    ) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x)?;
        let (value, dlogits) = loss(tape.value(rec.logits))?;
        let grads = tape.backward_with_seed(rec.logits, dlogits)?;
        let param_grads = rec.params.iter().map(|&p| grads.get_or_zeros(&tape, p)).collect();
        Ok((value, param_grads))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(logits.row_iter().map(argmax).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in &self.params {
            for v in p.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let n = r.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let dims: Vec<usize> = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        check_dims(&dims).map_err(|e| Error::Format(e.to_string()))?;
        let mut params = Vec::new();
        for w in dims.windows(2) {
            for (rows, cols) in [(w[0], w[1]), (1, w[1])] {
                let values = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                params.push(Matrix::new(rows, cols, values).map_err(|e| Error::Format(e.to_string()))?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::from_params(&dims, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint that must match `dims` exactly.
    pub fn load_expecting(path: impl AsRef<Path>, dims: &[usize]) -> Result<Self> {
        let m = Self::load(path)?;
        if m.dims != dims {
            return Err(Error::shape(format!(
                "checkpoint has dims {:?}, architecture expects {dims:?}",
                m.dims
            )));
        }
        Ok(m)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← m·v + (g + wd·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        }
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if v.shape() != p.shape() {
                return Err(Error::shape("velocity does not match parameter".to_string()));
            }
            let (pv, gv, vv) = (p.as_mut_slice(), g.as_slice(), v.as_mut_slice());
            for ((w, &gi), vi) in pv.iter_mut().zip(gv).zip(vv.iter_mut()) {
                *vi = momentum * *vi + (gi + weight_decay * *w);
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn rng() -> rand_chacha::ChaCha8Rng {
        stream(42, Stream::Check)
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let m = Mlp::zeros(&[4, 8, 3]).unwrap();
        let x = Matrix::from_fn(5, 4, |i, j| (i + j) as f64);
        assert_eq!(m.forward(&x).unwrap(), Matrix::zeros(5, 3));
    }

    #[test]
    fn param_count_formula() {
        let m = Mlp::new(&[16, 128, 128, 30], &mut rng()).unwrap();
        assert_eq!(m.param_count(), 17 * 128 + 129 * 128 + 129 * 30);
    }

    #[test]
    fn single_layer_is_affine() {
        let m = Mlp::new(&[3, 2], &mut rng()).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 0.3, 2.0]]).unwrap();
        let (w, b) = (&m.params()[0], &m.params()[1]);
        let mut expect = Matrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let mut s = b.get(0, j);
                for k in 0..3 {
                    s += x.get(i, k) * w.get(k, j);
                }
                expect.set(i, j, s);
            }
        }
        assert!(m.forward(&x).unwrap().max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn row_permutation_permutes_logits() {
        let m = Mlp::new(&[3, 6, 4], &mut rng()).unwrap();
        let x = Matrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * (j as f64 + 0.5));
        let perm = [2, 0, 3, 1];
        let a = m.forward(&x.select_rows(&perm)).unwrap();
        let b = m.forward(&x).unwrap().select_rows(&perm);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = Mlp::zeros(&[3, 2]).unwrap();
        assert!(matches!(m.forward(&Matrix::zeros(1, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn plain_sgd_step() {
        let mut sgd = Sgd::new(SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0 });
        let mut p = vec![Matrix::from_rows(&[[1.0, 2.0]]).unwrap()];
        let g = vec![Matrix::from_rows(&[[0.5, -1.0]]).unwrap()];
        sgd.step(&mut p, &g).unwrap();
        assert_eq!(p[0], Matrix::from_rows(&[[0.5, 3.0]]).unwrap());
    }

    #[test]
    fn momentum_two_steps() {
        let mut sgd = Sgd::new(SgdConfig { lr: 1.0, momentum: 0.9, weight_decay: 0.0 });
        let mut p = vec![Matrix::scalar(0.0)];
        let g = vec![Matrix::scalar(2.0)];
        sgd.step(&mut p, &g).unwrap();
        sgd.step(&mut p, &g).unwrap();
        // Δw = −(g + 1.9g) = −2.9g
        assert!((p[0].get(0, 0) + 2.9 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let (lr, wd) = (0.1, 0.5);
        let mut sgd = Sgd::new(SgdConfig { lr, momentum: 0.0, weight_decay: wd });
        let mut p = vec![Matrix::scalar(3.0)];
        let g = vec![Matrix::scalar(0.0)];
        sgd.step(&mut p, &g).unwrap();
        assert!((p[0].get(0, 0) - 3.0 * (1.0 - lr * wd)).abs() < 1e-15);
        // with momentum: v1 = wd·w0, w1 = w0(1 − lr·wd); v2 = m·v1 + wd·w1
        let m = 0.9;
        let mut sgd = Sgd::new(SgdConfig { lr, momentum: m, weight_decay: wd });
        let mut p = vec![Matrix::scalar(3.0)];
        sgd.step(&mut p, &g).unwrap();
        sgd.step(&mut p, &g).unwrap();
        let w1 = 3.0 * (1.0 - lr * wd);
        let v2 = m * wd * 3.0 + wd * w1;
        assert!((p[0].get(0, 0) - (w1 - lr * v2)).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut sgd = Sgd::new(SgdConfig::default());
        let mut p = vec![Matrix::zeros(2, 2)];
        assert!(sgd.step(&mut p, &[Matrix::zeros(1, 2)]).is_err());
        assert!(sgd.step(&mut p, &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Mlp::new(&[5, 7, 3], &mut rng()).unwrap();
        m.save(&path).unwrap();
        let back = Mlp::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());

        assert!(matches!(Mlp::load_expecting(&path, &[5, 8, 3]), Err(Error::Shape(_))));

        let mut bytes = m.to_bytes();
        bytes[0] ^= 0xff;
        assert!(matches!(Mlp::from_bytes(&bytes), Err(Error::Format(_))));

        let mut bytes = m.to_bytes();
        bytes[8] = 9;
        assert!(matches!(Mlp::from_bytes(&bytes), Err(Error::Format(_))));

        let bytes = m.to_bytes();
        assert!(matches!(Mlp::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn loss_and_grads_match_finite_differences() {
        use crate::losses::ce_loss;
        let m = Mlp::new(&[3, 5, 4], &mut rng()).unwrap();
        let x = Matrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin() * 2.0);
        let labels = [0, 1, 2, 3, 1, 0];
        let (_, grads) = m.loss_and_grads(&x, |z| ce_loss(z, &labels, None)).unwrap();
        let h = 1e-6;
        for (pi, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let eval = |delta: f64| {
                    let mut probe = m.clone();
                    probe.params_mut()[pi].as_mut_slice()[k] += delta;
                    ce_loss(&probe.forward(&x).unwrap(), &labels, None).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.as_slice()[k];
                assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-5 || (fd - an).abs() < 1e-9);
            }
        }
    }
}
