//! Finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::model::{Mode, ModelConfig, Tcan};
use crate::tape::{OpKind, Tape, Var};
use crate::train::{loss_multi, loss_total, loss_uni};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f32,
    pub tol: f32,
    /// Total coordinates to sample; every parameter contributes at least one.
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-3,
            max_coords: Some(100),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub coords: Vec<CoordCheck>,
    /// Sampled coordinates whose ±eps evaluations fall on different sides
    /// of a ReLU or `abs` kink; they are not scored.
    pub skipped: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coords.iter().all(|c| c.rel_err <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(move |c| c.rel_err > self.tol)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Worst coordinate per parameter group (the name without its last
    /// dotted segment).
    pub fn worst_by_group(&self) -> BTreeMap<String, &CoordCheck> {
        let mut out: BTreeMap<String, &CoordCheck> = BTreeMap::new();
        for c in &self.coords {
            let group = param_group(&c.param).to_string();
            match out.get(&group) {
                Some(prev) if prev.rel_err >= c.rel_err => {}
                _ => {
                    out.insert(group, c);
                }
            }
        }
        out
    }

    /// Sorted by descending error.
    pub fn worst_offenders(&self, n: usize) -> Vec<&CoordCheck> {
        let mut v: Vec<_> = self.coords.iter().collect();
        v.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        v.truncate(n);
        v
    }
}

pub fn param_group(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the gradient produced by `backward_into` with central finite
/// differences for the parameters in `params` (all parameters when empty).
///
/// `f` must build the same scalar on a fresh tape every call.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&cfg.eps) {
        return Err(Error::Config(format!("grad_check eps {} outside [1e-4, 1e-2]", cfg.eps)));
    }
    let ids: Vec<ParamId> = if params.is_empty() { store.ids() } else { params.to_vec() };

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward_into(loss, store)?;
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| {
            let t = store.get(id);
            t.grad().map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_param = coords_per_param(store, &ids, cfg.max_coords);
    let mut coords = Vec::new();
    let mut skipped = Vec::new();
    for ((&id, grads), count) in ids.iter().zip(&analytic).zip(per_param) {
        let n = store.get(id).numel();
        let picks: Vec<usize> = if count >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, count).into_vec();
            v.sort_unstable();
            v
        };
        for idx in picks {
            let Some(numeric) = central_difference(store, id, idx, cfg.eps, &f)? else {
                skipped.push((store.name(id).to_string(), idx));
                continue;
            };
            let a = f64::from(grads[idx]);
            coords.push(CoordCheck {
                param: store.name(id).to_string(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    Ok(GradCheckReport {
        tol: f64::from(cfg.tol),
        coords,
        skipped,
    })
}

fn coords_per_param(store: &ParamStore, ids: &[ParamId], budget: Option<usize>) -> Vec<usize> {
    let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).numel()).collect();
    let Some(budget) = budget else { return sizes };
    let total: usize = sizes.iter().sum();
    if total <= budget {
        return sizes;
    }
    // one each, remainder proportional to size
    let spare = budget.saturating_sub(ids.len());
    sizes
        .iter()
        .map(|&n| (1 + spare * n / total.max(1)).min(n))
        .collect()
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok((f64::from(tape.scalar(loss)), tape.kink_signature()))
}

/// `None` when the two evaluations straddle a kink.
fn central_difference<F>(store: &mut ParamStore, id: ParamId, idx: usize, eps: f32, f: &F) -> Result<Option<f64>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let orig = store.get(id).data()[idx];
    let plus = orig + eps;
    let minus = orig - eps;
    store.get_mut(id).data_mut()[idx] = plus;
    let lp = eval_loss(store, f);
    store.get_mut(id).data_mut()[idx] = minus;
    let lm = eval_loss(store, f);
    store.get_mut(id).data_mut()[idx] = orig;
    // the representable step, not the nominal one
    let step = f64::from(plus) - f64::from(minus);
    let ((lp, sp), (lm, sm)) = (lp?, lm?);
    Ok((sp == sm).then(|| (lp - lm) / step))
}

/// Gradient check of the full training objective of a freshly initialised
/// model on a two-sample synthetic batch. With `fault` set, that op's
/// backward rule is sabotaged (negative control).
pub fn check_model(
    model_cfg: &ModelConfig,
    model_seed: u64,
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let data = generate_synthetic(&SyntheticConfig {
        n_samples: 2,
        seed: model_seed,
        lengths: [(4, 6), (5, 8), (6, 9)],
        val_fraction: 0.0,
        test_fraction: 0.0,
        ..Default::default()
    })?;
    let mut model = Tcan::new(model_cfg.clone(), data.widths, model_seed)?;
    let batch = data.train;
    let labels: Vec<f32> = batch.iter().map(|s| s.label).collect();
    let probe = model.clone();
    grad_check(model.params_mut(), &[], cfg, |tape, store| {
        if let Some(kind) = fault {
            tape.inject_backward_fault(kind);
        }
        let view = probe.with_params(store)?;
        let mut preds = Vec::new();
        let mut uni = Vec::new();
        for s in &batch {
            let out = view.forward(tape, s, Mode::Train)?;
            preds.push(out.y_pred);
            if let Some(u) = out.y_uni {
                uni.push(u.into_iter().map(|(_, v)| v).collect::<Vec<_>>());
            }
        }
        let l_multi = loss_multi(tape, &preds, &labels)?;
        let l_uni = if uni.is_empty() { None } else { Some(loss_uni(tape, &uni, &labels)?) };
        loss_total(tape, l_multi, l_uni, model_cfg.lambda)
    })
}
