//! Finite-difference gradient checking for `ToyNet` parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stenosis_core::toynet::{HeadGrad, ToyNet};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Relative-error denominators never drop below this, so gradients that are
/// zero up to rounding do not blow up the ratio.
pub const FLOOR: f64 = 1e-5;
/// One-sided differences disagreeing by more than this mark a ReLU kink
/// inside the probe interval.
pub const KINK_GAP: f64 = 1e-3;
pub const MAX_KINKS: usize = 3;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub probes: usize,
    pub worst: f64,
    pub worst_at: String,
    /// Probes straddling a kink. Each still has to agree with one side.
    pub kinks: Vec<String>,
    pub kink_mismatch: Vec<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.worst < TOLERANCE && self.kinks.len() <= MAX_KINKS && self.kink_mismatch.is_empty()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(FLOOR)
}

/// Checks `per_tensor` randomly chosen entries of every parameter tensor
/// (all entries for small tensors). `f(net, keep_cache)` returns the scalar
/// objective and its gradient with respect to the head outputs.
pub fn check_gradients(
    net: &mut ToyNet,
    per_tensor: usize,
    mut f: impl FnMut(&mut ToyNet, bool) -> (f64, HeadGrad),
) -> GradReport {
    let (_, g) = f(net, true);
    net.params.zero_grad();
    net.backward(&g).expect("backward");
    let analytic: Vec<Vec<f64>> = net.params.iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = net.params.iter().map(|p| p.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut report = GradReport::default();

    let mut eval = |net: &mut ToyNet, pi: usize, k: usize, v: f64| {
        net.params.iter_mut().nth(pi).unwrap().data[k] = v;
        f(net, false).0
    };

    for pi in 0..analytic.len() {
        let len = analytic[pi].len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for k in picks {
            let orig = net.params.iter().nth(pi).unwrap().data[k];
            let up = eval(net, pi, k, orig + STEP);
            let down = eval(net, pi, k, orig - STEP);
            let base = eval(net, pi, k, orig);
            let a = analytic[pi][k];
            let central = (up - down) / (2.0 * STEP);
            let fwd = (up - base) / STEP;
            let bwd = (base - down) / STEP;
            let at = format!("{}[{k}]", names[pi]);
            report.probes += 1;
            if rel(fwd, bwd) > KINK_GAP {
                if rel(a, fwd).min(rel(a, bwd)) > KINK_GAP {
                    report
                        .kink_mismatch
                        .push(format!("{at}: analytic {a} forward {fwd} backward {bwd}"));
                }
                report.kinks.push(at);
                continue;
            }
            let err = rel(a, central);
            if err > report.worst {
                report.worst = err;
                report.worst_at = format!("{at}: analytic {a} numeric {central}");
            }
        }
    }
    report
}
