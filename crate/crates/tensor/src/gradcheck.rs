//! Finite-difference verification of analytic gradients.
//!
//! A function under test maps leaf inputs to a tensor of any shape. Its output
//! is projected to a scalar with fixed pseudo-random weights, the analytic
//! gradient of that scalar is taken from the tape, and a central difference is
//! evaluated for each checked input coordinate.

use crate::{Element, Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Lower bound on the relative-error denominator, so that coordinates
    /// whose true gradient is near zero are judged on absolute error.
    pub floor: f64,
    /// Per-input cap on checked coordinates; larger inputs are subsampled.
    pub max_coords: usize,
    /// Seed for the projection weights and the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            rel_tol: 1e-4,
            floor: 1e-3,
            max_coords: 64,
            seed: 0x5EED,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub checked: usize,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.rel_tol && self.max_rel_error.is_finite()
    }
}

/// SplitMix64 stream, used so the check needs no external RNG.
#[derive(Clone, Debug)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)`.
    pub fn next_signed(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

fn projection_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed ^ 0xA5A5_A5A5);
    (0..n).map(|_| rng.next_signed()).collect()
}

fn project<T: Element>(out: &Tensor<T>, weights: &[f64]) -> f64 {
    out.data().iter().zip(weights).map(|(y, w)| y.widen() * w).sum()
}

fn coordinates(n: usize, cap: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    // partial Fisher-Yates over the index range
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..cap {
        let j = i + (rng.next_u64() % (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut picked = idx[..cap].to_vec();
    picked.sort_unstable();
    picked
}

/// Compares analytic and central-difference gradients of `f` with respect to
/// every tensor in `inputs`.
pub fn check_gradients<T, F>(f: F, inputs: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let weights = projection_weights(tape.value(out).numel(), cfg.seed);
    let w = tape.constant(Tensor::from_f64(tape.shape(out).to_vec(), &weights)?);
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss)?;

    let mut rng = SplitMix64::new(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        rel_tol: cfg.rel_tol,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for c in coordinates(inputs[k].numel(), cfg.max_coords, &mut rng) {
            let x0 = inputs[k].data()[c];
            let plus = T::lift(x0.widen() + cfg.step);
            let minus = T::lift(x0.widen() - cfg.step);
            work[k].data_mut()[c] = plus;
            let fp = project(&eval(&work)?, &weights);
            work[k].data_mut()[c] = minus;
            let fm = project(&eval(&work)?, &weights);
            work[k].data_mut()[c] = x0;
            let numeric = (fp - fm) / (plus.widen() - minus.widen());
            let a = analytic[c];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel_error > report.max_rel_error || rel_error.is_nan() {
                report.max_rel_error = if rel_error.is_nan() { f64::INFINITY } else { rel_error };
                report.worst = Some(CoordError {
                    input: k,
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
        }
    }
    Ok(report)
}
