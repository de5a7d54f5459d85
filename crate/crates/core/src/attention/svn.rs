//! Reduced non-local attention whose keys and values are the dominant left
//! singular vectors of spatial sub-regions of a bottleneck feature map.

use super::matrix::{dot, Matrix};
use super::power::{power_iteration_traced, PowerTrace, SignFix};
use super::regions::{FeatureView, RegionBounds, RegionGrid};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::tape::{BackwardCtx, BackwardOp};
use crate::tensor::{BatchStats, ConvGeometry, NormParams, Shape4, Tape, Tensor4, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvnConfig {
    /// Channel count C' of the bottleneck.
    pub bottleneck_channels: usize,
    /// Region grids whose keys are concatenated, in this order.
    pub scales: Vec<RegionGrid>,
    /// Power-iteration count T.
    pub power_iters: usize,
    pub sign_fix: SignFix,
    pub zero_tol: f64,
    /// Stop gradients from flowing back through key extraction.
    pub stop_key_gradient: bool,
    /// Batch norm and ReLU after the channel-reducing 1x1 convolution.
    pub bottleneck_norm: bool,
}

impl SvnConfig {
    pub fn new(bottleneck_channels: usize, scales: Vec<RegionGrid>) -> Self {
        Self {
            bottleneck_channels,
            scales,
            power_iters: 2,
            sign_fix: SignFix::LargestPositive,
            zero_tol: 1e-12,
            stop_key_gradient: false,
            bottleneck_norm: true,
        }
    }

    /// One 8x8 grid (64 keys).
    pub fn single_scale(bottleneck_channels: usize) -> Self {
        Self::new(bottleneck_channels, vec![RegionGrid::new(8, 8)])
    }

    /// 8x8 and 4x4 grids (80 keys).
    pub fn multi_scale(bottleneck_channels: usize) -> Self {
        Self::new(bottleneck_channels, vec![RegionGrid::new(8, 8), RegionGrid::new(4, 4)])
    }

    pub fn total_regions(&self) -> usize {
        self.scales.iter().map(RegionGrid::count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_channels == 0 {
            return config_err("bottleneck channel count must be positive");
        }
        if self.scales.is_empty() {
            return config_err("at least one region grid is required");
        }
        if self.power_iters == 0 {
            return config_err("power iteration count must be at least 1");
        }
        if !(self.zero_tol > 0.0) {
            return config_err("zero tolerance must be positive");
        }
        for (i, g) in self.scales.iter().enumerate() {
            if g.rows == 0 || g.cols == 0 {
                return config_err(format!("grid {g} has a zero extent"));
            }
            if self.scales[..i].contains(g) {
                return config_err(format!("grid {g} listed twice"));
            }
        }
        Ok(())
    }
}

/// `C' x S_total` matrix whose columns are unit-norm (or zero) regional
/// dominant singular vectors, scales in config order and regions row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyValueBank {
    pub keys: Matrix,
}

impl KeyValueBank {
    pub fn channels(&self) -> usize {
        self.keys.rows()
    }

    pub fn len(&self) -> usize {
        self.keys.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.cols() == 0
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.keys.column(j)
    }
}

struct RegionTrace {
    bounds: RegionBounds,
    trace: PowerTrace,
}

fn extract_traced(map: FeatureView<'_>, cfg: &SvnConfig) -> (KeyValueBank, Vec<RegionTrace>) {
    let c = map.c;
    let total = cfg.total_regions();
    let u0 = vec![1.0; c];
    let mut keys = Matrix::zeros(c, total);
    let mut traces = Vec::with_capacity(total);
    let mut col = 0;
    for grid in &cfg.scales {
        for bounds in grid.bounds(map.h, map.w) {
            let region = map.gather(&bounds);
            let trace = power_iteration_traced(&region, cfg.power_iters, &u0, cfg.zero_tol, cfg.sign_fix);
            for (i, &v) in trace.key().iter().enumerate() {
                keys.set(i, col, v);
            }
            traces.push(RegionTrace { bounds, trace });
            col += 1;
        }
    }
    (KeyValueBank { keys }, traces)
}

/// Keys of every region at every configured scale, by `T` power iterations
/// from the all-ones vector.
pub fn extract_keys(map: FeatureView<'_>, cfg: &SvnConfig) -> Result<KeyValueBank> {
    cfg.validate()?;
    if map.data.len() != map.c * map.h * map.w {
        return dim_err("feature view length does not match its shape");
    }
    Ok(extract_traced(map, cfg).0)
}

/// `O_i = Σ_j (Q_i · K_j) V_j` with keys and values both the bank columns,
/// no normalization: `O = B (Bᵀ Q)`.
pub fn reduced_nonlocal(q: &Matrix, bank: &KeyValueBank) -> Result<Matrix> {
    if q.rows() != bank.channels() {
        return config_err(format!(
            "query dimension {} does not match key dimension {}",
            q.rows(),
            bank.channels()
        ));
    }
    let p = bank.keys.transpose().matmul(q)?;
    bank.keys.matmul(&p)
}

/// Normalization `C` of the generic query-key-value non-local operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalizer {
    None,
    /// Divide by the number of keys.
    Mean,
    /// Row-wise softmax of the dot-product scores.
    Softmax,
}

/// `O_i = (1/C) Σ_j (q_i · k_j) v_j` for `Q: C1 x N1`, `K: C1 x N2`,
/// `V: C2 x N2`. Streams over queries so memory stays `O(N2)`.
pub fn standard_nonlocal(q: &Matrix, k: &Matrix, v: &Matrix, normalizer: Normalizer) -> Result<Matrix> {
    if q.rows() != k.rows() {
        return config_err(format!("query rows {} != key rows {}", q.rows(), k.rows()));
    }
    if k.cols() != v.cols() {
        return config_err(format!("key count {} != value count {}", k.cols(), v.cols()));
    }
    let (c1, n1, n2, c2) = (q.rows(), q.cols(), k.cols(), v.rows());
    let mut out = Matrix::zeros(c2, n1);
    let mut scores = vec![0.0; n2];
    for i in 0..n1 {
        scores.fill(0.0);
        for c in 0..c1 {
            let qc = q.get(c, i);
            for (s, &kv) in scores.iter_mut().zip(k.row(c)) {
                *s += qc * kv;
            }
        }
        match normalizer {
            Normalizer::None => {}
            Normalizer::Mean => {
                let inv = 1.0 / n2 as f64;
                scores.iter_mut().for_each(|s| *s *= inv);
            }
            Normalizer::Softmax => {
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                scores.iter_mut().for_each(|s| *s /= z);
            }
        }
        for c in 0..c2 {
            out.set(c, i, dot(v.row(c), &scores));
        }
    }
    Ok(out)
}

fn bank_matrix(t: &Tensor4, n: usize) -> Matrix {
    let s = t.shape();
    Matrix::from_vec(s.c, s.h * s.w, t.sample(n).to_vec()).expect("bank shape")
}

/// Row-major `A Bᵀ` for `A: r x k`, `B: c x k`.
fn matmul_abt(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.rows(), |i, j| dot(a.row(i), b.row(j)))
}

struct KeysOp {
    traces: Vec<Vec<RegionTrace>>,
}

impl BackwardOp for KeysOp {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        let f = ctx.input(0);
        let s = f.shape();
        let mut gf = Tensor4::zeros(s);
        let plane = s.plane();
        for (n, traces) in self.traces.iter().enumerate() {
            let view = FeatureView::of(f, n);
            let gbank = bank_matrix(grad, n);
            let base = n * s.c * plane;
            for (j, rt) in traces.iter().enumerate() {
                if rt.trace.is_degenerate() || rt.bounds.pixels() == 0 {
                    continue;
                }
                let region = view.gather(&rt.bounds);
                let da = rt.trace.backward(&region, &gbank.column(j));
                let width = rt.bounds.c1 - rt.bounds.c0;
                let data = gf.data_mut();
                for ch in 0..s.c {
                    for (k, &g) in da.row(ch).iter().enumerate() {
                        let (r, col) = (rt.bounds.r0 + k / width, rt.bounds.c0 + k % width);
                        data[base + ch * plane + r * s.w + col] += g;
                    }
                }
            }
        }
        Ok(vec![Some(gf)])
    }
}

struct ReducedOp;

impl BackwardOp for ReducedOp {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        let q = ctx.input(0);
        let bank = ctx.input(1);
        let qs = q.shape();
        let mut gq = Vec::with_capacity(q.len());
        let mut gb = Vec::with_capacity(bank.len());
        for n in 0..qs.n {
            let qm = Matrix::from_vec(qs.c, qs.plane(), q.sample(n).to_vec())?;
            let go = Matrix::from_vec(qs.c, qs.plane(), grad.sample(n).to_vec())?;
            let b = bank_matrix(bank, n);
            let bt = b.transpose();
            let p = bt.matmul(&qm)?;
            let r = bt.matmul(&go)?;
            gq.extend(b.matmul(&r)?.into_vec());
            let left = matmul_abt(&go, &p);
            let right = matmul_abt(&qm, &r);
            gb.extend(left.data().iter().zip(right.data()).map(|(a, b)| a + b));
        }
        Ok(vec![
            Some(Tensor4::from_vec(qs, gq)?),
            Some(Tensor4::from_vec(bank.shape(), gb)?),
        ])
    }
}

impl Tape {
    /// Key bank of every sample of `f`, recorded as a `(n, C', 1, S)` tensor.
    pub fn svn_keys(&mut self, f: Var, cfg: &SvnConfig) -> Result<Var> {
        cfg.validate()?;
        let fv = self.value(f)?;
        let s = fv.shape();
        let total = cfg.total_regions();
        let mut data = Vec::with_capacity(s.n * s.c * total);
        let mut traces = Vec::with_capacity(s.n);
        for n in 0..s.n {
            let (bank, tr) = extract_traced(FeatureView::of(fv, n), cfg);
            data.extend(bank.keys.into_vec());
            traces.push(tr);
        }
        let out = Tensor4::from_vec(Shape4::new(s.n, s.c, 1, total), data)?;
        self.record(
            out,
            &[f],
KeysOp { traces },
        )
    }

    /// Reduced non-local aggregation of queries `q` `(n, C', H, W)` over a
    /// bank `(n, C', 1, S)` produced by [`Tape::svn_keys`].
    pub fn reduced_nonlocal(&mut self, q: Var, bank: Var) -> Result<Var> {
        let qv = self.value(q)?;
        let bv = self.value(bank)?;
        let (qs, bs) = (qv.shape(), bv.shape());
        if qs.n != bs.n || qs.c != bs.c || bs.h != 1 {
            return config_err(format!("queries {qs} incompatible with key bank {bs}"));
        }
        let mut out = Vec::with_capacity(qv.len());
        for n in 0..qs.n {
            let qm = Matrix::from_vec(qs.c, qs.plane(), qv.sample(n).to_vec())?;
            let bank = KeyValueBank {
                keys: bank_matrix(bv, n),
            };
            out.extend(reduced_nonlocal(&qm, &bank)?.into_vec());
        }
        let y = Tensor4::from_vec(qs, out)?;
        self.record(y, &[q, bank], ReducedOp)
    }
}

/// Tape handles of the SVN block parameters.
#[derive(Clone, Debug)]
pub struct SvnVars<'a> {
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    /// (gamma, beta, running mean, running var) of the bottleneck norm.
    pub norm: Option<(Var, Var, &'a [f64], &'a [f64])>,
    pub conv2_weight: Var,
    pub conv2_bias: Var,
}

/// `y = x + Conv2(reduced_nonlocal(F, keys(F)))` with `F = Conv1(x)`
/// (optionally normalized and rectified). Returns the batch statistics of
/// the bottleneck norm when training.
pub fn svn_block(tape: &mut Tape, x: Var, vars: &SvnVars<'_>, cfg: &SvnConfig, training: bool, eps: f64) -> Result<(Var, Option<BatchStats>)> {
    let mut f = tape.conv2d(x, vars.conv1_weight, Some(vars.conv1_bias), ConvGeometry::default())?;
    let mut stats = None;
    if let Some((gamma, beta, mean, var)) = vars.norm {
        f = if training {
            let (y, st) = tape.batch_norm_train(f, gamma, beta, eps)?;
            stats = Some(st);
            y
        } else {
            tape.batch_norm_eval(f, gamma, beta, mean, var, eps)?
        };
        f = tape.relu(f)?;
    }
    let key_src = if cfg.stop_key_gradient { tape.detach(f)? } else { f };
    let bank = tape.svn_keys(key_src, cfg)?;
    let attended = tape.reduced_nonlocal(f, bank)?;
    let back = tape.conv2d(attended, vars.conv2_weight, Some(vars.conv2_bias), ConvGeometry::default())?;
    Ok((tape.add(x, back)?, stats))
}

/// Weights of a standalone SVN block.
#[derive(Clone, Debug)]
pub struct SvnWeights {
    /// `(C', C, 1, 1)`
    pub conv1_weight: Tensor4,
    pub conv1_bias: Vec<f64>,
    pub norm: Option<NormParams>,
    /// `(C, C', 1, 1)`
    pub conv2_weight: Tensor4,
    pub conv2_bias: Vec<f64>,
}

fn channel_tensor(v: &[f64]) -> Tensor4 {
    Tensor4::from_vec(Shape4::new(1, v.len(), 1, 1), v.to_vec()).expect("channel vector")
}

/// Plain forward pass of one SVN block. Training mode normalizes the
/// bottleneck with batch statistics (running statistics are not updated).
pub fn svn_module_forward(x: &Tensor4, w: &SvnWeights, cfg: &SvnConfig, training: bool) -> Result<Tensor4> {
    if w.conv1_weight.shape().n != cfg.bottleneck_channels {
        return config_err("Conv1 output channels differ from the configured bottleneck");
    }
    if cfg.bottleneck_norm != w.norm.is_some() {
        return config_err("bottleneck norm presence differs between config and weights");
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let c1w = tape.constant(w.conv1_weight.clone());
    let c1b = tape.constant(channel_tensor(&w.conv1_bias));
    let c2w = tape.constant(w.conv2_weight.clone());
    let c2b = tape.constant(channel_tensor(&w.conv2_bias));
    let (norm, eps) = match &w.norm {
        Some(p) => {
            let g = tape.constant(channel_tensor(&p.gamma));
            let b = tape.constant(channel_tensor(&p.beta));
            (Some((g, b, p.running_mean.as_slice(), p.running_var.as_slice())), p.epsilon)
        }
        None => (None, crate::tensor::BN_EPSILON),
    };
    let vars = SvnVars {
        conv1_weight: c1w,
        conv1_bias: c1b,
        norm,
        conv2_weight: c2w,
        conv2_bias: c2b,
    };
    let (y, _) = svn_block(&mut tape, xv, &vars, cfg, training, eps)?;
    Ok(tape.value(y)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(scales: Vec<RegionGrid>) -> SvnConfig {
        SvnConfig::new(3, scales)
    }

    #[test]
    fn constant_region_key_is_uniform_direction() {
        let t = Tensor4::full(Shape4::new(1, 4, 4, 4), 2.5);
        let bank = extract_keys(FeatureView::of(&t, 0), &SvnConfig::new(4, vec![RegionGrid::new(2, 2)])).unwrap();
        for j in 0..4 {
            for v in bank.column(j) {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_pixel_region_key_is_normalized_pixel() {
        let mut t = Tensor4::zeros(Shape4::new(1, 3, 2, 2));
        let px = [0.3, 1.2, 0.4];
        for (c, v) in px.iter().enumerate() {
            let i = t.index(0, c, 1, 0);
            t.data_mut()[i] = *v;
        }
        let bank = extract_keys(FeatureView::of(&t, 0), &cfg(vec![RegionGrid::new(1, 1)])).unwrap();
        let norm = (px.iter().map(|v| v * v).sum::<f64>()).sqrt();
        for (k, v) in bank.column(0).iter().zip(px) {
            assert!((k - v / norm).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_region_gives_zero_column() {
        let mut t = Tensor4::zeros(Shape4::new(1, 3, 4, 4));
        let i = t.index(0, 1, 0, 0);
        t.data_mut()[i] = 1.0;
        let bank = extract_keys(FeatureView::of(&t, 0), &cfg(vec![RegionGrid::new(2, 2)])).unwrap();
        assert_eq!(bank.column(0), vec![0.0, 1.0, 0.0]);
        for j in 1..4 {
            assert!(bank.column(j).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bank_column_order_follows_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor4::random_uniform(Shape4::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
        let v = FeatureView::of(&t, 0);
        let both = extract_keys(v, &cfg(vec![RegionGrid::new(4, 4), RegionGrid::new(2, 2)])).unwrap();
        let fine = extract_keys(v, &cfg(vec![RegionGrid::new(4, 4)])).unwrap();
        let coarse = extract_keys(v, &cfg(vec![RegionGrid::new(2, 2)])).unwrap();
        assert_eq!(both.len(), 20);
        for j in 0..16 {
            assert_eq!(both.column(j), fine.column(j));
        }
        for j in 0..4 {
            assert_eq!(both.column(16 + j), coarse.column(j));
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(vec![]).validate().is_err());
        assert!(cfg(vec![RegionGrid::new(2, 2), RegionGrid::new(2, 2)]).validate().is_err());
        let mut c = cfg(vec![RegionGrid::new(2, 2)]);
        c.power_iters = 0;
        assert!(c.validate().is_err());
        assert_eq!(SvnConfig::multi_scale(32).total_regions(), 80);
    }

    #[test]
    fn projector_onto_single_key() {
        let k = vec![0.6, 0.8, 0.0];
        let bank = KeyValueBank {
            keys: Matrix::from_vec(3, 1, k.clone()).unwrap(),
        };
        let q = Matrix::from_fn(3, 5, |i, _| k[i]);
        let o = reduced_nonlocal(&q, &bank).unwrap();
        for j in 0..5 {
            for i in 0..3 {
                assert!((o.get(i, j) - k[i]).abs() < 1e-15);
            }
        }
        let zero = KeyValueBank { keys: Matrix::zeros(3, 4) };
        assert!(reduced_nonlocal(&q, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let wrong = KeyValueBank { keys: Matrix::zeros(2, 4) };
        assert!(reduced_nonlocal(&q, &wrong).is_err());
    }

    #[test]
    fn softmax_with_one_pair_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Matrix::from_fn(4, 6, |_, _| rng.gen_range(-2.0..2.0));
        let k = Matrix::from_fn(4, 1, |_, _| rng.gen_range(-2.0..2.0));
        let v = Matrix::from_vec(3, 1, vec![0.1, -0.4, 2.0]).unwrap();
        let o = standard_nonlocal(&q, &k, &v, Normalizer::Softmax).unwrap();
        for i in 0..6 {
            assert_eq!(o.column(i), v.column(0));
        }
        assert!(standard_nonlocal(&q, &v, &v, Normalizer::None).is_err());
    }

    #[test]
    fn module_identity_when_conv2_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor4::random_uniform(Shape4::new(2, 6, 4, 8), -1.0, 1.0, &mut rng);
        let c = SvnConfig::new(3, vec![RegionGrid::new(2, 2)]);
        let w = SvnWeights {
            conv1_weight: Tensor4::random_uniform(Shape4::new(3, 6, 1, 1), -1.0, 1.0, &mut rng),
            conv1_bias: vec![0.1; 3],
            norm: Some(NormParams::identity(3)),
            conv2_weight: Tensor4::zeros(Shape4::new(6, 3, 1, 1)),
            conv2_bias: vec![0.0; 6],
        };
        assert_eq!(svn_module_forward(&x, &w, &c, true).unwrap(), x);
        assert_eq!(svn_module_forward(&x, &w, &c, false).unwrap(), x);
    }

    #[test]
    fn module_on_constant_input_is_spatially_constant() {
        let x = Tensor4::full(Shape4::new(1, 4, 4, 4), 0.7);
        let mut c = SvnConfig::new(2, vec![RegionGrid::new(1, 1)]);
        c.bottleneck_norm = false;
        let w = SvnWeights {
            conv1_weight: Tensor4::from_vec(Shape4::new(2, 4, 1, 1), vec![0.5, 0.1, 0.2, 0.3, 0.4, 0.2, 0.1, 0.9]).unwrap(),
            conv1_bias: vec![0.0; 2],
            norm: None,
            conv2_weight: Tensor4::full(Shape4::new(4, 2, 1, 1), 0.25),
            conv2_bias: vec![0.0; 4],
        };
        let y = svn_module_forward(&x, &w, &c, false).unwrap();
        for ch in 0..4 {
            let p = y.plane(0, ch);
            assert!(p.iter().all(|&v| (v - p[0]).abs() < 1e-14));
        }
    }
}
