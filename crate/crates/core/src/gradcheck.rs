//! Seeded finite-difference suites for the pooling kernels and whole models.
//!
//! Each trial draws a random configuration at a smooth point, contracts the
//! operator output with a random cotangent, and compares the analytic
//! gradient of that scalar against central differences. The error of a
//! parameter class in one trial is `‖g − ĝ‖∞ / max(‖g‖∞, ‖ĝ‖∞, 1e-8)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_model, InitSpec, LayerConfig, Model, ParamGroup, PoolParams, PoolWorkspace};
use crate::numeric::{fd_gradient, ActivationKind, Matrix, Rng};
use crate::pooling::{
    gauss_backward, gauss_forward, lhuc_apply, lhuc_backward, lp_backward, lp_forward, GaussPoolParams, LhucParams,
    LpPoolParams, PoolSpec, LP_EPS,
};

pub const POOL_SIZES: [usize; 3] = [2, 3, 5];
pub const BATCH_SIZES: [usize; 2] = [1, 4];

/// Smallest `|a_i|` an Lp trial may use: well above both `10·ε` and the FD
/// step, so no probe crosses the non-smooth locus at zero.
pub const LP_MIN_ABS: f64 = 0.1;
/// Minimum distance of `ρ` from the kink of `max(1, ρ)`.
pub const RHO_MARGIN: f64 = 1e-2;
/// Minimum pairwise gap between Gauss `z` values within a pool.
pub const Z_TIE_MARGIN: f64 = 1e-3;

const REL_FLOOR: f64 = 1e-8;
const MAX_REDRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradOp {
    Lp,
    Gauss,
    Lhuc,
    Model,
}

impl GradOp {
    pub const ALL: [GradOp; 4] = [GradOp::Lp, GradOp::Gauss, GradOp::Lhuc, GradOp::Model];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Lp => "lp",
            GradOp::Gauss => "gauss",
            GradOp::Lhuc => "lhuc",
            GradOp::Model => "model",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck op '{s}' (expected lp, gauss, lhuc or model)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub trial: usize,
    pub class: String,
    pub rel_error: f64,
    pub config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub op: GradOp,
    pub trials: usize,
    /// Largest relative error over all trials, per parameter class.
    pub max_rel_error: BTreeMap<String, f64>,
    pub failures: Vec<Exceedance>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "op {} trials {}", self.op, self.trials)?;
        for (class, err) in &self.max_rel_error {
            writeln!(f, "  {class:<8} max_rel_error {err:.3e}")?;
        }
        for e in &self.failures {
            writeln!(f, "  FAIL {} rel_error {:.3e} {}", e.class, e.rel_error, e.config)?;
        }
        Ok(())
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(REL_FLOOR)
}

struct Trial {
    config: String,
    /// (class, analytic, numeric)
    classes: Vec<(String, Vec<f64>, Vec<f64>)>,
}

pub fn run_gradcheck(op: GradOp, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    let mut report = GradcheckReport {
        op,
        trials: cfg.trials,
        max_rel_error: BTreeMap::new(),
        failures: Vec::new(),
    };
    for trial in 0..cfg.trials {
        let mut rng = Rng::derived(cfg.seed, trial as u64);
        let t = match op {
            GradOp::Lp => lp_trial(&mut rng, trial, cfg.step)?,
            GradOp::Gauss => gauss_trial(&mut rng, trial, cfg.step)?,
            GradOp::Lhuc => lhuc_trial(&mut rng, trial, cfg.step)?,
            GradOp::Model => model_trial(&mut rng, trial, cfg.step)?,
        };
        for (class, analytic, numeric) in t.classes {
            let err = relative_error(&analytic, &numeric);
            let slot = report.max_rel_error.entry(class.clone()).or_insert(0.0);
            *slot = slot.max(err);
            if !(err < cfg.tolerance) {
                report.failures.push(Exceedance {
                    trial,
                    class,
                    rel_error: err,
                    config: t.config.clone(),
                });
            }
        }
    }
    Ok(report)
}

fn shape_for(trial: usize) -> (usize, usize) {
    (POOL_SIZES[trial % POOL_SIZES.len()], BATCH_SIZES[(trial / POOL_SIZES.len()) % BATCH_SIZES.len()])
}

fn contract(out: &Matrix, cot: &Matrix) -> f64 {
    out.as_slice().iter().zip(cot.as_slice()).map(|(a, b)| a * b).sum()
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal(0.0, 1.0))
}

/// True when every `|a_i|` clears [`LP_MIN_ABS`] and every `ρ` clears
/// [`RHO_MARGIN`] around 1.
pub fn lp_point_is_smooth(a: &[f64], rho: &[f64]) -> bool {
    a.iter().all(|x| x.abs() >= LP_MIN_ABS) && rho.iter().all(|r| (r - 1.0).abs() > RHO_MARGIN)
}

/// True when no two `z` values within a pool are closer than
/// [`Z_TIE_MARGIN`].
pub fn gauss_point_is_smooth(z: &Matrix, pool_size: usize) -> bool {
    z.row_iter().all(|row| {
        row.chunks(pool_size).all(|pool| {
            pool.iter()
                .enumerate()
                .all(|(i, x)| pool[i + 1..].iter().all(|y| (x - y).abs() >= Z_TIE_MARGIN))
        })
    })
}

fn redraw<T>(mut draw: impl FnMut() -> T, mut ok: impl FnMut(&T) -> bool) -> Result<T> {
    for _ in 0..MAX_REDRAWS {
        let v = draw();
        if ok(&v) {
            return Ok(v);
        }
    }
    Err(Error::Contract("smooth-point sampler exhausted its redraw budget".into()))
}

/// Draws Lp pool inputs and orders from a wide range, keeping only smooth
/// points.
pub fn sample_lp_point(rng: &mut Rng, batch: usize, spec: PoolSpec) -> Result<(Matrix, LpPoolParams)> {
    let a = redraw(
        || Matrix::from_fn(batch, spec.input_width(), |_, _| rng.uniform(-2.0, 2.0)),
        |a| lp_point_is_smooth(a.as_slice(), &[]),
    )?;
    let rho = redraw(
        || (0..spec.num_pools).map(|_| rng.uniform(0.3, 6.0)).collect::<Vec<_>>(),
        |r| lp_point_is_smooth(&[], r),
    )?;
    Ok((a, LpPoolParams { rho }))
}

fn lp_trial(rng: &mut Rng, trial: usize, h: f64) -> Result<Trial> {
    let (k, batch) = shape_for(trial);
    let spec = PoolSpec::new(k, 1 + rng.index(3)).normalized(rng.coin());
    let (a, params) = sample_lp_point(rng, batch, spec)?;
    let cot = random_matrix(rng, batch, spec.num_pools);
    let (_, ws) = lp_forward(&a, spec, &params, LP_EPS)?;
    let g = lp_backward(&ws, &cot)?;

    let objective = |a: &Matrix, p: &LpPoolParams| {
        lp_forward(a, spec, p, LP_EPS).map_or(f64::NAN, |(out, _)| contract(&out, &cot))
    };
    let fd_a = fd_gradient(
        |v| objective(&Matrix::from_vec(batch, spec.input_width(), v.to_vec()).expect("same shape"), &params),
        a.as_slice(),
        h,
    )?;
    let fd_rho = fd_gradient(|r| objective(&a, &LpPoolParams { rho: r.to_vec() }), &params.rho, h)?;
    Ok(Trial {
        config: format!(
            "trial {trial}: K={k} batch={batch} pools={} normalize={} rho={:?}",
            spec.num_pools, spec.normalize, params.rho
        ),
        classes: vec![
            ("input".into(), g.input.into_vec(), fd_a),
            ("rho".into(), g.rho, fd_rho),
        ],
    })
}

fn gauss_trial(rng: &mut Rng, trial: usize, h: f64) -> Result<Trial> {
    let (k, batch) = shape_for(trial);
    let pools = 1 + rng.index(3);
    let spec = PoolSpec::new(k, pools);
    let params = GaussPoolParams {
        mu: (0..pools).map(|_| rng.normal(0.0, 1.0)).collect(),
        beta: (0..pools).map(|_| rng.uniform(-0.5, 4.0)).collect(),
        eta: (0..pools).map(|_| rng.uniform(0.5, 1.5)).collect(),
    };
    let a = redraw(
        || Matrix::from_fn(batch, spec.input_width(), |_, _| rng.uniform(-2.0, 2.0)),
        |a| {
            gauss_forward(a, spec, &params)
                .map(|(_, ws)| gauss_point_is_smooth(ws.z(), k))
                .unwrap_or(false)
        },
    )?;
    let cot = random_matrix(rng, batch, pools);
    let (_, ws) = gauss_forward(&a, spec, &params)?;
    let g = gauss_backward(&ws, &cot)?;

    let objective = |a: &Matrix, p: &GaussPoolParams| {
        gauss_forward(a, spec, p).map_or(f64::NAN, |(out, _)| contract(&out, &cot))
    };
    let fd_a = fd_gradient(
        |v| objective(&Matrix::from_vec(batch, spec.input_width(), v.to_vec()).expect("same shape"), &params),
        a.as_slice(),
        h,
    )?;
    let with = |f: &dyn Fn(&mut GaussPoolParams, &[f64]), v: &[f64]| {
        let mut p = params.clone();
        f(&mut p, v);
        objective(&a, &p)
    };
    let fd_mu = fd_gradient(|v| with(&|p, v| p.mu = v.to_vec(), v), &params.mu, h)?;
    let fd_beta = fd_gradient(|v| with(&|p, v| p.beta = v.to_vec(), v), &params.beta, h)?;
    let fd_eta = fd_gradient(|v| with(&|p, v| p.eta = v.to_vec(), v), &params.eta, h)?;
    Ok(Trial {
        config: format!(
            "trial {trial}: K={k} batch={batch} pools={pools} mu={:?} beta={:?} eta={:?}",
            params.mu, params.beta, params.eta
        ),
        classes: vec![
            ("input".into(), g.input.into_vec(), fd_a),
            ("mu".into(), g.mu, fd_mu),
            ("beta".into(), g.beta, fd_beta),
            ("eta".into(), g.eta, fd_eta),
        ],
    })
}

fn lhuc_trial(rng: &mut Rng, trial: usize, h: f64) -> Result<Trial> {
    let (k, batch) = shape_for(trial);
    // The pool size only varies the unit count here.
    let units = k * (1 + rng.index(3));
    let pooled = random_matrix(rng, batch, units);
    let params = LhucParams {
        r: (0..units).map(|_| rng.normal(0.0, 1.5)).collect(),
    };
    let cot = random_matrix(rng, batch, units);
    let (g_in, g_r) = lhuc_backward(&pooled, &params, &cot)?;
    let objective = |x: &Matrix, p: &LhucParams| lhuc_apply(x, p).map_or(f64::NAN, |out| contract(&out, &cot));
    let fd_in = fd_gradient(
        |v| objective(&Matrix::from_vec(batch, units, v.to_vec()).expect("same shape"), &params),
        pooled.as_slice(),
        h,
    )?;
    let fd_r = fd_gradient(|v| objective(&pooled, &LhucParams { r: v.to_vec() }), &params.r, h)?;
    Ok(Trial {
        config: format!("trial {trial}: units={units} batch={batch}"),
        classes: vec![("input".into(), g_in.into_vec(), fd_in), ("r".into(), g_r, fd_r)],
    })
}

/// Random two-hidden-layer net of the given pool type (`None` = sigmoid/tanh
/// DNN) with perturbed pooling and LHUC parameters.
fn random_model(rng: &mut Rng, kind: usize, k: usize, with_lhuc: bool) -> Result<Model> {
    let (input, pools, classes) = (3, 2, 3);
    let hidden = |in_dim: usize| match kind {
        0 => LayerConfig::LpPool {
            in_dim,
            units: pools * k,
            pool_size: k,
            normalize: in_dim.is_multiple_of(2),
        },
        1 => LayerConfig::GaussPool {
            in_dim,
            units: pools * k,
            pool_size: k,
        },
        _ => LayerConfig::Affine {
            in_dim,
            out_dim: pools,
            activation: if in_dim == input { ActivationKind::Sigmoid } else { ActivationKind::Tanh },
        },
    };
    let configs = [
        hidden(input),
        hidden(pools),
        LayerConfig::Affine {
            in_dim: pools,
            out_dim: classes,
            activation: ActivationKind::Softmax,
        },
    ];
    let mut model = build_model(&configs, rng, &InitSpec::default())?;
    for id in model.group_ids() {
        let fill: Box<dyn FnMut(&mut Rng) -> f64> = match id.group {
            ParamGroup::Biases => Box::new(|r| r.normal(0.0, 0.5)),
            ParamGroup::Rho => Box::new(|r| {
                let v = r.uniform(0.3, 5.0);
                if (v - 1.0).abs() <= RHO_MARGIN {
                    1.5
                } else {
                    v
                }
            }),
            ParamGroup::Mu => Box::new(|r| r.normal(0.0, 1.0)),
            ParamGroup::Beta => Box::new(|r| r.uniform(-0.5, 4.0)),
            ParamGroup::Eta => Box::new(|r| r.uniform(0.5, 1.5)),
            ParamGroup::Lhuc if with_lhuc => Box::new(|r| r.normal(0.0, 1.0)),
            _ => continue,
        };
        let mut fill = fill;
        let values: Vec<f64> = (0..model.group(id).map_or(0, <[f64]>::len)).map(|_| fill(rng)).collect();
        model.group_mut(id)?.copy_from_slice(&values);
    }
    Ok(model)
}

fn model_point_is_smooth(model: &Model, x: &Matrix) -> bool {
    let Ok((_, trace)) = model.forward(x) else {
        return false;
    };
    (0..model.layers().len()).all(|l| match trace.pool_workspace(l) {
        // A weight probe moves `a` by at most h·|x|, far below this margin.
        Some(PoolWorkspace::Lp(ws)) => ws.input().as_slice().iter().all(|v| v.abs() >= 1e-2),
        Some(PoolWorkspace::Gauss(ws)) => gauss_point_is_smooth(ws.z(), ws.spec().pool_size),
        None => true,
    })
}

fn model_trial(rng: &mut Rng, trial: usize, h: f64) -> Result<Trial> {
    let (k, batch) = shape_for(trial);
    let kind = (trial / 6) % 3;
    let with_lhuc = (trial / 18) % 2 == 1;
    let mut model = random_model(rng, kind, k, with_lhuc)?;
    let x = redraw(
        || Matrix::from_fn(batch, 3, |_, _| rng.uniform(-1.5, 1.5)),
        |x| model_point_is_smooth(&model, x),
    )?;
    let targets: Vec<usize> = (0..batch).map(|_| rng.index(model.num_classes())).collect();
    let grads = model.loss_and_gradients(&x, &targets)?;
    let theta = model.flat_params();
    let fd = {
        let mut probe = model.clone();
        fd_gradient(
            |v| {
                probe.set_flat_params(v).expect("same length");
                probe.loss(&x, &targets).unwrap_or(f64::NAN)
            },
            &theta,
            h,
        )?
    };
    model.set_flat_params(&theta)?;

    let mut classes: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut offset = 0;
    for (id, g) in grads.iter() {
        let n = g.len();
        let class = id.group.name().to_string();
        match classes.iter_mut().find(|(c, _, _)| *c == class) {
            Some((_, a, f)) => {
                a.extend_from_slice(g);
                f.extend_from_slice(&fd[offset..offset + n]);
            }
            None => classes.push((class, g.to_vec(), fd[offset..offset + n].to_vec())),
        }
        offset += n;
    }
    let kind_name = match model.layers()[0].pool {
        PoolParams::Lp(_) => "lp",
        PoolParams::Gauss(_) => "gauss",
        PoolParams::None => "dnn",
    };
    Ok(Trial {
        config: format!("trial {trial}: {kind_name} K={k} batch={batch} lhuc={with_lhuc}"),
        classes,
    })
}
