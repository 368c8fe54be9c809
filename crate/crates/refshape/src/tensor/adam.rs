//! Trainable parameters and the Adam optimizer. A [`ParamSet`] owns every
//! parameter of a network in creation order; graphs bind parameters as
//! leaves, gradients are pulled back with
//! [`accumulate_grads`](ParamSet::accumulate_grads), and
//! [`adam_step`](ParamSet::adam_step) applies one update.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Graph;
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults: learning rate 1e-4, betas (0.9, 0.999),
/// epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Argument(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Argument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Deterministic fan-based uniform initialization for a weight matrix
/// `[fan_in, fan_out]`: values drawn uniformly from `[-b, b]` with
/// `b = sqrt(6 / (fan_in + fan_out))`, in row-major order from a stream
/// seeded by `seed`.
pub fn seeded_init(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let b = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| rng.gen_range(-b..b)).collect()
}

/// One trainable tensor with its Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) step: u64,
    /// Weights participate in L2 regularization; biases do not.
    pub decayable: bool,
    grad_seen: bool,
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// All parameters of a network, in a stable creation order that defines the
/// checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { params: Vec::new() }
    }

    fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>, decayable: bool) -> ParamId {
        let n = values.len();
        debug_assert_eq!(shape.iter().product::<usize>(), n);
        self.params.push(Parameter {
            name: name.to_string(),
            shape,
            values,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            decayable,
            grad_seen: false,
        });
        ParamId(self.params.len() - 1)
    }

    /// A weight matrix with fan-based uniform init.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize, seed: u64) -> ParamId {
        self.add(name, vec![rows, cols], seeded_init(rows, cols, seed), true)
    }

    /// A bias vector, zero-initialized and excluded from L2 regularization.
    pub fn add_bias(&mut self, name: &str, len: usize) -> ParamId {
        self.add(name, vec![len], vec![0.0; len], false)
    }

    /// An arbitrary tensor with explicit initial values (used by tests and
    /// gradient checking). Not decayable.
    pub fn add_raw(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        self.add(name, shape, values, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.grad_seen = false;
        }
    }

    /// Adds `scale` times each bound parameter's graph gradient into its
    /// gradient buffer. The graph must have run `backward`.
    pub fn accumulate_grads(&mut self, graph: &Graph, scale: f64) -> Result<()> {
        for &(pid, tid) in graph.bindings() {
            let p = &mut self.params[pid.0];
            match graph.grad(tid) {
                Some(g) => {
                    for (acc, &gv) in p.grad.iter_mut().zip(g) {
                        *acc += gv * scale;
                    }
                }
                // a bound parameter the loss does not depend on still has a
                // well-defined (zero) gradient
                None => {}
            }
            p.grad_seen = true;
        }
        Ok(())
    }

    /// One Adam update over every parameter, then clears gradients.
    /// Stepping without any prior gradient accumulation is a state error.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        if let Some(p) = self.params.iter().find(|p| !p.grad_seen) {
            return Err(Error::State(format!(
                "adam_step before any gradient reached parameter {:?}",
                p.name
            )));
        }
        for p in &mut self.params {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for j in 0..p.values.len() {
                let g = p.grad[j];
                p.m[j] = cfg.beta1 * p.m[j] + (1.0 - cfg.beta1) * g;
                p.v[j] = cfg.beta2 * p.v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.m[j] / bc1;
                let v_hat = p.v[j] / bc2;
                p.values[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        self.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut params = ParamSet::new();
        let w = params.add_raw("w", vec![1], vec![0.0]);
        params.get_mut(w).grad[0] = 1.0;
        params.get_mut(w).grad_seen = true;
        let cfg = AdamConfig {
            learning_rate: 0.001,
            ..AdamConfig::default()
        };
        params.adam_step(&cfg).unwrap();
        // bias correction makes the first step exactly -lr (up to epsilon)
        assert!((params.get(w).values[0] - (-0.001)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut params = ParamSet::new();
        let w = params.add_raw("w", vec![2], vec![3.5, -1.25]);
        params.get_mut(w).grad_seen = true;
        params.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(params.get(w).values, vec![3.5, -1.25]);
    }

    #[test]
    fn step_without_gradients_is_a_state_error() {
        let mut params = ParamSet::new();
        params.add_raw("w", vec![1], vec![0.0]);
        let err = params.adam_step(&AdamConfig::default());
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // loss = theta^2, gradient = 2 theta
        let mut params = ParamSet::new();
        let w = params.add_raw("theta", vec![1], vec![1.0]);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut losses = Vec::new();
        for _ in 0..800 {
            let theta = params.get(w).values[0];
            losses.push(theta * theta);
            params.get_mut(w).grad[0] = 2.0 * theta;
            params.get_mut(w).grad_seen = true;
            params.adam_step(&cfg).unwrap();
        }
        let final_theta = params.get(w).values[0];
        assert!(final_theta * final_theta < 1e-4, "theta = {final_theta}");
        // the early phase descends monotonically at this step size
        for i in 0..50 {
            assert!(losses[i + 1] < losses[i], "step {i}");
        }
    }

    #[test]
    fn adam_config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        let bad = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeded_init_is_deterministic_and_bounded() {
        let a = seeded_init(16, 8, 42);
        let b = seeded_init(16, 8, 42);
        assert_eq!(a, b);
        let c = seeded_init(16, 8, 43);
        assert_ne!(a, c);
        let bound = (6.0 / 24.0f64).sqrt();
        assert!(a.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn seeded_init_is_centered() {
        // mean of many draws is near zero
        let vals = seeded_init(100, 1000, 7);
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn bias_starts_at_zero_and_is_not_decayed() {
        let mut params = ParamSet::new();
        let b = params.add_bias("b", 4);
        assert_eq!(params.get(b).values, vec![0.0; 4]);
        assert!(!params.get(b).decayable);
    }

    #[test]
    fn accumulate_from_two_graphs_sums() {
        let mut params = ParamSet::new();
        let w = params.add_raw("w", vec![1], vec![2.0]);
        params.zero_grads();
        for _ in 0..2 {
            let mut g = Graph::new();
            let t = g.parameter(&params, w);
            let y = g.mul(t, t).unwrap(); // y = w^2, dy/dw = 2w = 4
            let s = g.sum(y);
            g.backward(s).unwrap();
            params.accumulate_grads(&g, 0.5).unwrap();
        }
        // two graphs, each scaled by 0.5: total = 4
        assert_eq!(params.get(w).grad, vec![4.0]);
    }
}
