//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{GlobalDBlock, GlobalMBlock};
use crate::error::{Error, Result};
use crate::gas::AxialLayout;
use crate::layers::{Activation, HeInit};
use crate::network::{GlobalMindModel, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{bcd_loss_tape, SampleMask};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub param: String,
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences in every coordinate of `theta`.
///
/// `f` must be deterministic; it is rebuilt on a fresh tape for each
/// perturbation. Parameter gradients in `store` are overwritten.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    theta: ParamId,
    step: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let analytic = {
        store.zero_grad();
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss, store)?;
        store.grad(theta).clone()
    };
    let name = store.get(theta).name.clone();
    let n = store.value(theta).len();
    let mut eval = |store: &ParamStore<f64>, i: usize, sign: &str| -> Result<f64> {
        let mut tape = Tape::new();
        let v = match f(&mut tape, store) {
            Ok(v) => tape.value(v).item(),
            Err(e) if e.is_numeric() => f64::NAN,
            Err(e) => return Err(e),
        };
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite at {name}[{i}] {sign} step"
            )));
        }
        Ok(v)
    };

    let mut worst = (0.0f64, 0usize);
    for i in 0..n {
        let orig = store.value(theta).data()[i];
        store.get_mut(theta).value.data_mut()[i] = orig + step;
        let plus = eval(store, i, "+");
        store.get_mut(theta).value.data_mut()[i] = orig - step;
        let minus = eval(store, i, "-");
        store.get_mut(theta).value.data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel > worst.0 || i == 0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        param: name,
        max_rel_error: worst.0,
        worst_index: worst.1,
        coordinates: n,
    })
}

/// Runs [`grad_check`] on every parameter of `store` and returns one report
/// per parameter, in declaration order.
pub fn grad_check_all<F>(
    store: &mut ParamStore<f64>,
    step: f64,
    mut f: F,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    ids.into_iter()
        .map(|id| grad_check(store, id, step, &mut f))
        .collect()
}

/// Default relative-error bound for the suites below.
pub const TOLERANCE: f64 = 1e-4;

/// Small end-to-end problem: a 6×5×3 scene pair, a 4-channel model and
/// labels on every pixel.
pub struct ModelProblem {
    pub model: GlobalMindModel<f64>,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub mask: SampleMask,
}

impl ModelProblem {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (h, w, b) = (6, 5, config.in_bands);
        let model = GlobalMindModel::<f32>::init_he_normal(config, seed)?.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let mut cube = || Tensor::from_fn(&[h, w, b], |_| rng.gen_range(-1.0..1.0));
        let (x, y) = (cube(), cube());
        let pixels: Vec<usize> = (0..h * w).collect();
        let labels = pixels.iter().map(|&p| u8::from(p % 3 == 0)).collect();
        Ok(Self {
            model,
            x,
            y,
            mask: SampleMask { height: h, width: w, pixels, labels },
        })
    }

    pub fn default_config() -> ModelConfig {
        ModelConfig {
            channels: 4,
            ..ModelConfig::with_bands(3)
        }
    }

    fn loss(&self, tape: &mut Tape<f64>, store: &ParamStore<f64>) -> Result<Var> {
        let x = tape.constant(self.x.clone())?;
        let y = tape.constant(self.y.clone())?;
        let out = self.model.forward_tape_with(tape, store, x, y)?;
        bcd_loss_tape(tape, out, &self.mask)
    }

    /// Checks the end-to-end loss gradient for every model parameter.
    pub fn check(&mut self, step: f64) -> Result<Vec<GradCheckReport>> {
        let mut store = self.model.params.clone();
        let reports = grad_check_all(&mut store, step, |tape, s| self.loss(tape, s));
        self.model.params = store;
        reports
    }
}

/// End-to-end gradient check for every ablation variant of the model.
pub fn model_suite(seed: u64) -> Result<Vec<(String, Vec<GradCheckReport>)>> {
    let mut out = Vec::new();
    for (m, d) in [(true, true), (false, false), (true, false), (false, true)] {
        let cfg = ModelConfig {
            enable_global_m: m,
            enable_global_d: d,
            ..ModelProblem::default_config()
        };
        let name = cfg.variant_name().to_string();
        let mut problem = ModelProblem::new(cfg, seed)?;
        out.push((name, problem.check(DEFAULT_STEP)?));
    }
    Ok(out)
}

/// Named gradient-check result: worst relative error over all parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub worst: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self, tol: f64) -> bool {
        self.worst.max_rel_error <= tol
    }
}

fn entry(name: impl Into<String>, reports: Vec<GradCheckReport>) -> SuiteEntry {
    SuiteEntry {
        name: name.into(),
        worst: worst(&reports).cloned().expect("suite case has parameters"),
    }
}

struct Case {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn random(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-1.0..1.0))
    }

    fn param(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let v = self.random(shape);
        self.store.add(name, v)
    }

    /// Checks `sum(out ⊙ R)` for a fixed random `R`, so every output
    /// coordinate carries a distinct weight.
    fn check<F>(mut self, name: &str, out_shape: &[usize], f: F) -> Result<SuiteEntry>
    where
        F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let r = self.random(out_shape);
        let reports = grad_check_all(&mut self.store, DEFAULT_STEP, |tape, s| {
            let out = f(tape, s)?;
            let w = tape.constant(r.clone())?;
            let prod = tape.mul(out, w)?;
            tape.sum(prod)
        })?;
        Ok(entry(name, reports))
    }
}

/// Gradient check of every differentiable tape operation on small random
/// shapes.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let s = |i: u64| seed.wrapping_mul(1000).wrapping_add(i);

    let mut c = Case::new(s(0));
    let (a, b) = (c.param("a", &[2, 3, 4]), c.param("b", &[2, 4, 2]));
    out.push(c.check("matmul", &[2, 3, 2], move |t, p| {
        let (a, b) = (t.param(p, a), t.param(p, b));
        t.matmul(a, b)
    })?);

    let mut c = Case::new(s(1));
    let (a, b) = (c.param("a", &[2, 3, 4]), c.param("b", &[4, 2]));
    out.push(c.check("matmul_shared_rhs", &[2, 3, 2], move |t, p| {
        let (a, b) = (t.param(p, a), t.param(p, b));
        t.matmul(a, b)
    })?);

    for k in [1, 3, 5] {
        let mut c = Case::new(s(2 + k as u64));
        let x = c.param("x", &[4, 3, 2]);
        let w = c.param("w", &[k, k, 2, 3]);
        let b = c.param("b", &[3]);
        out.push(c.check(&format!("conv2d_same_k{k}"), &[4, 3, 3], move |t, p| {
            let (x, w, b) = (t.param(p, x), t.param(p, w), t.param(p, b));
            t.conv2d_same(x, w, b)
        })?);
    }

    let mut c = Case::new(s(10));
    let x = c.param("x", &[3, 4]);
    out.push(c.check("softmax_lastdim", &[3, 4], move |t, p| {
        let x = t.param(p, x);
        t.softmax_lastdim(x)
    })?);

    let mut c = Case::new(s(11));
    let x = c.param("x", &[3, 2, 4]);
    let g = c.param("gamma", &[4]);
    let b = c.param("beta", &[4]);
    out.push(c.check("layer_norm", &[3, 2, 4], move |t, p| {
        let (x, g, b) = (t.param(p, x), t.param(p, g), t.param(p, b));
        t.layer_norm(x, g, b)
    })?);

    type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;
    let unary: [(&str, Unary); 3] = [
        ("gelu", |t, x| t.gelu(x)),
        ("relu", |t, x| t.relu(x)),
        ("abs", |t, x| t.abs(x)),
    ];
    for (i, (name, op)) in unary.into_iter().enumerate() {
        let mut c = Case::new(s(20 + i as u64));
        let x = c.param("x", &[3, 5]);
        out.push(c.check(name, &[3, 5], move |t, p| {
            let x = t.param(p, x);
            op(t, x)
        })?);
    }

    type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
    let binary: [(&str, Binary); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("scale", |t, a, _| t.scale(a, -1.7)),
    ];
    for (i, (name, op)) in binary.into_iter().enumerate() {
        let mut c = Case::new(s(30 + i as u64));
        let (a, b) = (c.param("a", &[2, 3]), c.param("b", &[2, 3]));
        out.push(c.check(name, &[2, 3], move |t, p| {
            let (a, b) = (t.param(p, a), t.param(p, b));
            op(t, a, b)
        })?);
    }

    let mut c = Case::new(s(40));
    let (a, b) = (c.param("a", &[2, 2, 3]), c.param("b", &[2, 2, 2]));
    out.push(c.check("concat", &[2, 2, 5], move |t, p| {
        let (a, b) = (t.param(p, a), t.param(p, b));
        t.concat(&[a, b])
    })?);

    let mut c = Case::new(s(41));
    let x = c.param("x", &[2, 3, 4]);
    out.push(c.check("reshape", &[6, 4], move |t, p| {
        let x = t.param(p, x);
        t.reshape(x, &[6, 4])
    })?);

    let mut c = Case::new(s(42));
    let x = c.param("x", &[2, 3, 4]);
    out.push(c.check("permute", &[4, 2, 3], move |t, p| {
        let x = t.param(p, x);
        t.permute(x, &[2, 0, 1])
    })?);

    let mut c = Case::new(s(43));
    let x = c.param("x", &[2, 3, 4]);
    out.push(c.check("transpose_last2", &[2, 4, 3], move |t, p| {
        let x = t.param(p, x);
        t.transpose_last2(x)
    })?);

    let mut c = Case::new(s(44));
    let x = c.param("x", &[2, 2, 2]);
    let reports = grad_check_all(&mut c.store, DEFAULT_STEP, move |t, p| {
        let x = t.param(p, x);
        let probs = t.softmax_lastdim(x)?;
        t.binary_cross_entropy(probs, &[0, 1, 3], &[1, 0, 1], 1e-7)
    })?;
    out.push(entry("binary_cross_entropy", reports));

    Ok(out)
}

/// Gradient check of the GlobalM and GlobalD blocks on a 4×3×2 map, for both
/// layouts, with every parameter (biases and norms included) randomized.
pub fn block_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (i, layout) in [AxialLayout::Grs, AxialLayout::Gcs].into_iter().enumerate() {
        let mut c = Case::new(seed.wrapping_add(i as u64));
        let mut init = HeInit::new(seed);
        let m = GlobalMBlock::new(&mut c.store, &mut init, "m", 2, 2, Activation::Gelu, layout);
        let d = GlobalDBlock::new(&mut c.store, &mut init, "d", 2, 2, Activation::Gelu, layout, false);
        for p in c.store.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::from_fn(&shape, |_| c.rng.gen_range(-1.0..1.0));
        }
        let x = c.random(&[4, 3, 2]);
        let y = c.random(&[4, 3, 2]);
        let tag = layout.short_name();
        let xm = x.clone();
        let mut store = c.store.clone();
        let r = c.random(&[4, 3, 2]);
        let weighted = |t: &mut Tape<f64>, v: Var, r: &Tensor<f64>| -> Result<Var> {
            let w = t.constant(r.clone())?;
            let prod = t.mul(v, w)?;
            t.sum(prod)
        };
        let ids: Vec<ParamId> = store.ids().filter(|id| store.get(*id).name.starts_with("m.")).collect();
        let reports = ids
            .into_iter()
            .map(|id| {
                grad_check(&mut store, id, DEFAULT_STEP, |t, s| {
                    let z = t.constant(xm.clone())?;
                    let o = m.forward(t, s, z)?;
                    weighted(t, o, &r)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(entry(format!("globalm_{tag}"), reports));
        // input gradient of the block, through the same tape machinery
        let mut inputs = store.clone();
        let xi = inputs.add("x", xm.clone());
        let rep = grad_check(&mut inputs, xi, DEFAULT_STEP, |t, s| {
            let z = t.param(s, xi);
            let o = m.forward(t, s, z)?;
            weighted(t, o, &r)
        })?;
        out.push(entry(format!("globalm_{tag}_input"), vec![rep]));

        let ids: Vec<ParamId> = store.ids().filter(|id| store.get(*id).name.starts_with("d.")).collect();
        let reports = ids
            .into_iter()
            .map(|id| {
                grad_check(&mut store, id, DEFAULT_STEP, |t, s| {
                    let (fx, fy) = (t.constant(x.clone())?, t.constant(y.clone())?);
                    let o = d.forward(t, s, fx, fy)?;
                    weighted(t, o, &r)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(entry(format!("globald_{tag}"), reports));
        let mut inputs = store.clone();
        let xi = inputs.add("fx", x.clone());
        let yi = inputs.add("fy", y.clone());
        let reports = [xi, yi]
            .into_iter()
            .map(|id| {
                grad_check(&mut inputs, id, DEFAULT_STEP, |t, s| {
                    let (fx, fy) = (t.param(s, xi), t.param(s, yi));
                    let o = d.forward(t, s, fx, fy)?;
                    weighted(t, o, &r)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(entry(format!("globald_{tag}_inputs"), reports));
    }
    Ok(out)
}

/// End-to-end loss check of every ablation variant, one entry per variant.
pub fn model_entries(seed: u64) -> Result<Vec<SuiteEntry>> {
    Ok(model_suite(seed)?
        .into_iter()
        .map(|(name, reports)| entry(format!("model_{name}"), reports))
        .collect())
}

/// Largest relative error of a set of reports.
pub fn worst(reports: &[GradCheckReport]) -> Option<&GradCheckReport> {
    reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
}
