//! Central finite-difference check of the analytic backward pass through
//! the full forward map and the combined loss.

use crate::error::Result;
use crate::loss::{total_loss, DiceOptions, LossWeights};
use crate::raster::{LabelMap, IGNORE};
use crate::rng::SeededRng;
use crate::tensor::FeatureMap;

use super::{ModelConfig, ModelParams, SfrNet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub n_params: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negative control: scale the analytic gradient before comparing.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            n_params: 200,
            step: 1e-4,
            tolerance: 1e-4,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

struct Problem {
    patches: Vec<FeatureMap>,
    labels: LabelMap,
    weights: LossWeights,
}

impl Problem {
    fn loss(&self, params: &ModelParams) -> Result<f64> {
        let out = params.forward(&self.patches)?;
        Ok(total_loss(&out.main, &out.aux, &self.labels, &self.weights, DiceOptions::default())?.total)
    }
}

/// Random parameters (every tensor non-zero, including embeddings and
/// fusion weights), random inputs and labels with one ignored pixel.
/// Weights use a variance-preserving `±√(6/fan_in)` range so that every
/// branch carries O(1) signal and no gradient sinks into rounding noise.
fn random_problem(config: ModelConfig, seed: u64) -> Result<(ModelParams, Problem)> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = SeededRng::with_stream(seed, 7);
    for p in params.params_mut() {
        let bound = match p.shape.as_slice() {
            [_, ci, k1, k2] => (6.0 / (ci * k1 * k2) as f64).sqrt(),
            [_, ci] => (6.0 / *ci as f64).sqrt(),
            _ => 0.5,
        };
        for v in p.value.iter_mut() {
            *v = rng.range(-bound, bound);
        }
    }
    let (h, w) = config.input_size;
    let patches = (0..config.n_scales)
        .map(|_| {
            let data = (0..config.in_channels * h * w).map(|_| rng.uniform()).collect();
            FeatureMap::from_vec(config.in_channels, h, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut labels: Vec<u8> = (0..h * w).map(|_| rng.below(config.classes) as u8).collect();
    labels[0] = IGNORE;
    let labels = LabelMap::new(w, h, config.classes, labels)?;
    Ok((
        params,
        Problem {
            patches,
            labels,
            weights: LossWeights::default(),
        },
    ))
}

pub fn gradient_check(config: ModelConfig, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (params, problem) = random_problem(config, opts.seed)?;
    let mut net = SfrNet::new(params);
    net.zero_grad();
    let out = net.forward_train(&problem.patches)?;
    let loss = total_loss(&out.main, &out.aux, &problem.labels, &problem.weights, DiceOptions::default())?;
    net.backward(&loss.grad_main, &loss.grad_aux)?;

    let sizes: Vec<usize> = net.params.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = SeededRng::with_stream(opts.seed, 11);
    let mut flat: Vec<usize> = (0..total).collect();
    // partial Fisher-Yates: first n_params entries are a uniform sample
    let picks = opts.n_params.min(total);
    for i in 0..picks {
        let j = i + rng.below(total - i);
        flat.swap(i, j);
    }

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        passed: true,
    };
    let mut probe = net.params.clone();
    for &f in &flat[..picks] {
        let (mut pi, mut idx) = (0, f);
        while idx >= sizes[pi] {
            idx -= sizes[pi];
            pi += 1;
        }
        let mut analytic = net.params.params()[pi].grad[idx];
        if opts.corrupt {
            analytic = analytic * 1.5 + 1e-3;
        }
        let orig = probe.params()[pi].value[idx];
        probe.params_mut()[pi].value[idx] = orig + opts.step;
        let plus = problem.loss(&probe)?;
        probe.params_mut()[pi].value[idx] = orig - opts.step;
        let minus = problem.loss(&probe)?;
        probe.params_mut()[pi].value[idx] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some((net.params.params()[pi].name.clone(), idx));
        }
    }
    report.passed = report.max_rel_err < opts.tolerance;
    Ok(report)
}
