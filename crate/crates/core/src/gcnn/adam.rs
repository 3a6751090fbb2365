pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 1e-2;
        let mut p = vec![1.0, -2.0, 0.5, 3.0];
        let g = vec![0.3, -1e-3, 50.0, -7.0];
        let before = p.clone();
        let mut st = AdamState::new(4);
        adam_step(&mut p, &g, &mut st, lr);
        for ((a, b), gi) in p.iter().zip(&before).zip(&g) {
            let delta = b - a;
            assert_eq!(delta.signum(), gi.signum());
            assert!(
                delta.abs() <= lr && delta.abs() >= lr * (1.0 - 1e-5),
                "{delta}"
            );
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1);
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn two_steps_on_a_parabola() {
        // f(w) = w², f'(w) = 2w. By hand with lr 0.1:
        // step 1: m̂ = 2, v̂ = 4 -> w = 1 - 0.1·2/(2+1e-8) ≈ 0.9
        // step 2: g = 1.8, m = 0.9·0.2 + 0.1·1.8 = 0.36, m̂ = 0.36/0.19,
        //         v = 0.999·0.004 + 0.001·3.24 = 0.007236, v̂ = v/0.001999
        let mut w = vec![1.0];
        let mut st = AdamState::new(1);
        let f = |w: f64| w * w;
        let f0 = f(w[0]);
        let g = [2.0 * w[0]];
        adam_step(&mut w, &g, &mut st, 0.1);
        let f1 = f(w[0]);
        assert!((w[0] - 0.9).abs() < 1e-8);
        let g = [2.0 * w[0]];
        adam_step(&mut w, &g, &mut st, 0.1);
        let f2 = f(w[0]);
        let m_hat = 0.36 / 0.19;
        let v_hat = 0.007236 / (1.0 - 0.999f64.powi(2));
        let expected = 0.9 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((w[0] - expected).abs() < 1e-9);
        assert!(f0 > f1 && f1 > f2);
    }
}
