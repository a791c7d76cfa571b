//! Central finite-difference checks of the backward pass.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::{Arch, ClassifierModel, ModelConfig};
use crate::nn::{CHANNELS, IMAGE_SIDE};
use crate::tensor::{FaultInjection, Graph, Tensor};

pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor: below this magnitude both gradients count as zero and
/// the difference is judged in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// `h = 1e-5·max(1, |x|)`.
pub fn step_size(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at `x` for each coordinate in `indices`.
/// `x` is restored before returning.
pub fn numeric_gradient(x: &mut [f64], indices: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let orig = x[i];
            let h = step_size(orig);
            x[i] = orig + h;
            let plus = f(x);
            x[i] = orig - h;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub batch: usize,
    /// Entries checked per parameter tensor; `None` checks every entry.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
    /// Add `U(±jitter)` to every parameter first so zero-initialised biases
    /// and unit gains do not sit on special points.
    pub jitter: f64,
    pub faults: FaultInjection,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            batch: 2,
            samples_per_param: None,
            seed: 0,
            jitter: 0.1,
            faults: FaultInjection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub arch: Arch,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    /// Max relative error per module group, in model order, each group once.
    pub fn groups(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for p in &self.params {
            match out.iter_mut().find(|(g, _)| *g == p.group) {
                Some((_, e)) => *e = e.max(p.max_rel_error),
                None => out.push((p.group.clone(), p.max_rel_error)),
            }
        }
        out
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error.is_nan() || p.max_rel_error >= TOLERANCE)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// Gradient check of a model's full classification loss at 64-bit.
pub fn check_model(config: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut model = ClassifierModel::<f64>::build(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    if opts.jitter > 0.0 {
        for p in model.store.iter_mut() {
            for w in p.value.data_mut() {
                *w += rng.gen_range(-opts.jitter..opts.jitter);
            }
        }
    }
    let images = Tensor::from_fn(&[opts.batch, CHANNELS, IMAGE_SIDE, IMAGE_SIDE], |_| rng.gen_range(-2.0..2.0));
    let labels: Vec<usize> = (0..opts.batch).map(|_| rng.gen_range(0..config.n_classes)).collect();

    let g = Graph::new();
    g.inject_faults(opts.faults);
    let bindings = model.attach(&g);
    let logits = model.forward(&g, &bindings, &images)?;
    let loss_var = g.cross_entropy(logits, &labels)?;
    let loss = g.value(loss_var).item();
    let grads = g.backward(loss_var)?;
    model.store.load_grads(&bindings, &grads);
    drop(g);

    let loss_at = |m: &ClassifierModel<f64>| -> f64 {
        let g = Graph::inference();
        let p = m.attach(&g);
        let logits = m.forward(&g, &p, &images).expect("shapes fixed by the analytic pass");
        let l = g.cross_entropy(logits, &labels).expect("labels in range");
        let v = g.value(l).item();
        v
    };

    let ids: Vec<_> = model.store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let (name, n, analytic) = {
            let p = model.store.get(id);
            (p.name.clone(), p.value.len(), p.grad.data().to_vec())
        };
        let indices: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut x = model.store.get(id).value.data().to_vec();
        let numeric = numeric_gradient(&mut x, &indices, |xs| {
            model.store.get_mut(id).value.data_mut().copy_from_slice(xs);
            loss_at(&model)
        });
        model.store.get_mut(id).value.data_mut().copy_from_slice(&x);
        let (worst_index, max_rel_error) = indices
            .iter()
            .zip(&numeric)
            .map(|(&i, &num)| (i, relative_error(analytic[i], num)))
            .fold((0, 0.0), |best, cur| if cur.1 > best.1 || cur.1.is_nan() { cur } else { best });
        params.push(ParamCheck {
            group: group_of(&name),
            name,
            checked: indices.len(),
            max_rel_error,
            worst_index,
        });
    }
    Ok(GradcheckReport {
        arch: config.arch,
        loss,
        params,
    })
}

fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("blocks"), Some(i)) => format!("blocks.{i}"),
        (Some(first), _) => first.to_string(),
        _ => String::new(),
    }
}
