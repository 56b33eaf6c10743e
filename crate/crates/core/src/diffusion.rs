//! Denoising-diffusion mathematics for action chunks: the noise
//! schedule, forward noising, the noise-prediction loss, and the
//! iterative ancestral sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffkernel::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat, Vec3};

/// Width of one action: position (3) + quaternion (4) + gripper (1).
pub const ACTION_WIDTH: usize = 8;

/// One absolute end-effector target: `[x, y, z, qw, qx, qy, qz, g]`
/// with the gripper command in `[0, 1]` (values below 0.5 close).
pub type Action = [f64; ACTION_WIDTH];

pub fn action_position(a: &Action) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

pub fn action_orientation(a: &Action) -> Quat {
    Quat::new(a[3], a[4], a[5], a[6])
}

pub fn action_gripper(a: &Action) -> f64 {
    a[7]
}

pub fn action_from_pose(pose: &Pose, gripper: f64) -> Action {
    [
        pose.position.x,
        pose.position.y,
        pose.position.z,
        pose.orientation.w,
        pose.orientation.x,
        pose.orientation.y,
        pose.orientation.z,
        gripper,
    ]
}

/// A horizon-length block of future actions; the diffusion variable.
///
/// Values are unconstrained during denoising; the quaternion slice is
/// renormalized and the gripper clamped only at execution time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    horizon: usize,
    data: Vec<f64>,
}

impl ActionChunk {
    pub fn zeros(horizon: usize) -> ActionChunk {
        ActionChunk {
            horizon,
            data: vec![0.0; horizon * ACTION_WIDTH],
        }
    }

    pub fn from_actions(actions: &[Action]) -> ActionChunk {
        ActionChunk {
            horizon: actions.len(),
            data: actions.iter().flatten().copied().collect(),
        }
    }

    pub fn from_flat(horizon: usize, data: Vec<f64>) -> Result<ActionChunk> {
        if data.len() != horizon * ACTION_WIDTH {
            return Err(Error::Validation(format!(
                "chunk data length {} != horizon {horizon} x {ACTION_WIDTH}",
                data.len()
            )));
        }
        Ok(ActionChunk { horizon, data })
    }

    /// Standard normal chunk, drawn entry by entry in row-major order.
    pub fn randn(horizon: usize, rng: &mut impl Rng) -> ActionChunk {
        ActionChunk {
            horizon,
            data: (0..horizon * ACTION_WIDTH)
                .map(|_| rng.sample(StandardNormal))
                .collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn action(&self, t: usize) -> Action {
        self.data[t * ACTION_WIDTH..(t + 1) * ACTION_WIDTH]
            .try_into()
            .expect("action width")
    }

    pub fn set_action(&mut self, t: usize, a: Action) {
        self.data[t * ACTION_WIDTH..(t + 1) * ACTION_WIDTH].copy_from_slice(&a);
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        (0..self.horizon).map(|t| self.action(t))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Diffusion constants: step count `K`, per-step betas, and the
/// cumulative products `alpha_bar` (with `alpha_bar[0] = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Beta for step `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    /// Cumulative product for step `k` in `0..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Digest guarding against train/inference schedule mismatch.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.steps as u64).to_le_bytes());
        for b in &self.beta {
            hasher.update(b.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Build a linear-beta schedule with `k_steps` steps.
pub fn make_schedule(k_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if k_steps == 0 {
        return Err(Error::validation("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Validation(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = if k_steps == 1 {
        vec![beta_start]
    } else {
        (0..k_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (k_steps - 1) as f64)
            .collect()
    };
    let mut alpha_bar = Vec::with_capacity(k_steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        steps: k_steps,
        beta,
        alpha_bar,
    })
}

/// Forward noising: `a^k = sqrt(alpha_bar_k) a^0 + sqrt(1 - alpha_bar_k) eps`.
pub fn forward_noise(
    a0: &ActionChunk,
    k: usize,
    eps: &ActionChunk,
    schedule: &NoiseSchedule,
) -> Result<ActionChunk> {
    if k > schedule.steps() {
        return Err(Error::Validation(format!(
            "step {k} outside schedule 0..={}",
            schedule.steps()
        )));
    }
    if eps.horizon() != a0.horizon() {
        return Err(Error::Validation(format!(
            "noise horizon {} != chunk horizon {}",
            eps.horizon(),
            a0.horizon()
        )));
    }
    let ab = schedule.alpha_bar(k);
    let c0 = ab.sqrt();
    let c1 = (1.0 - ab).sqrt();
    let data = a0
        .flat()
        .iter()
        .zip(eps.flat())
        .map(|(&a, &e)| c0 * a + c1 * e)
        .collect();
    ActionChunk::from_flat(a0.horizon(), data)
}

/// Mean squared error between true and predicted noise.
pub fn noise_loss(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    if eps.len() != eps_hat.len() || eps.is_empty() {
        return Err(Error::Validation(format!(
            "noise length mismatch: {} vs {}",
            eps.len(),
            eps_hat.len()
        )));
    }
    let n = eps.len() as f64;
    Ok(eps
        .iter()
        .zip(eps_hat)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// MSE plus its gradient with respect to the prediction:
/// `d loss / d pred = 2 (pred - target) / n`.
pub fn mse_with_grad<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Validation(format!(
            "mse shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::validation("mse over empty tensors"));
    }
    let inv = S::from_f64(1.0 / n as f64);
    let two = S::from_f64(2.0);
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let d = p - t;
        loss += (d * d).as_f64();
        *g = two * d * inv;
    }
    Ok((loss / n as f64, grad))
}

/// A learned noise predictor `eps_theta(a^k, k, f_A)` over flattened
/// chunks of shape `(1, L)`.
pub trait NoisePredictor<S: Scalar> {
    fn predict(&self, a_k: &Tensor<S>, k: usize, f_a: &Tensor<S>) -> Result<Tensor<S>>;
}

impl<S: Scalar, F> NoisePredictor<S> for F
where
    F: Fn(&Tensor<S>, usize, &Tensor<S>) -> Result<Tensor<S>>,
{
    fn predict(&self, a_k: &Tensor<S>, k: usize, f_a: &Tensor<S>) -> Result<Tensor<S>> {
        self(a_k, k, f_a)
    }
}

/// Ancestral sampling: start from `a^K ~ N(0, I)` and apply
/// `a^{k-1} = (a^k - beta_k / sqrt(1 - alpha_bar_k) eps_hat) / sqrt(1 - beta_k)
///  + sqrt(beta_k) z`, with fresh Gaussian `z` for `k > 1` and `z = 0`
/// at the final step. Returns the clean flattened chunk `a^0`.
///
/// All Gaussian draws happen in f64 row-major order, so a seed fully
/// determines the trajectory at either precision.
pub fn denoise_sample<S: Scalar>(
    predictor: &dyn NoisePredictor<S>,
    f_a: &Tensor<S>,
    schedule: &NoiseSchedule,
    chunk_len: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<S>> {
    let mut a: Tensor<S> = Tensor::from_vec(
        vec![1, chunk_len],
        (0..chunk_len)
            .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    )?;
    for k in (1..=schedule.steps()).rev() {
        let eps_hat = predictor.predict(&a, k, f_a)?;
        if eps_hat.shape() != a.shape() {
            return Err(Error::Validation(format!(
                "predictor returned shape {:?}, expected {:?}",
                eps_hat.shape(),
                a.shape()
            )));
        }
        let beta = schedule.beta(k);
        let ab = schedule.alpha_bar(k);
        let coeff = S::from_f64(beta / (1.0 - ab).sqrt());
        let inv_sqrt = S::from_f64(1.0 / (1.0 - beta).sqrt());
        let sigma = S::from_f64(beta.sqrt());
        for (av, &ev) in a.data_mut().iter_mut().zip(eps_hat.data()) {
            *av = (*av - coeff * ev) * inv_sqrt;
        }
        if k > 1 {
            for av in a.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *av = *av + sigma * S::from_f64(z);
            }
        }
        if !a.is_finite() {
            return Err(Error::DivergedSampler { step: k });
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1), 0.5);
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        for k in 1..=50 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let mut product = 1.0;
        for b in s.betas() {
            product *= 1.0 - b;
        }
        assert!((s.alpha_bar(10) - product).abs() < 1e-15);
    }

    #[test]
    fn invalid_beta_ranges_are_rejected() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(5, 0.0, 0.2).is_err());
        assert!(make_schedule(5, 0.3, 0.2).is_err());
        assert!(make_schedule(5, 0.3, 1.0).is_err());
    }

    #[test]
    fn schedule_hash_distinguishes_schedules() {
        let a = make_schedule(50, 1e-4, 0.02).unwrap();
        let b = make_schedule(50, 1e-4, 0.021).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), make_schedule(50, 1e-4, 0.02).unwrap().hash());
    }

    #[test]
    fn forward_noise_at_step_zero_is_identity() {
        let mut rng = derive_rng(7, "diff", 0);
        let a0 = ActionChunk::randn(4, &mut rng);
        let eps = ActionChunk::randn(4, &mut rng);
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let out = forward_noise(&a0, 0, &eps, &s).unwrap();
        assert_eq!(out, a0);
    }

    #[test]
    fn forward_noise_at_final_step_is_mostly_noise() {
        // With a saturating schedule alpha_bar_K ~ 0.
        let mut rng = derive_rng(7, "diff", 1);
        let a0 = ActionChunk::randn(2, &mut rng);
        let eps = ActionChunk::randn(2, &mut rng);
        let s = make_schedule(200, 0.05, 0.2).unwrap();
        assert!(s.alpha_bar(200) < 1e-6);
        let out = forward_noise(&a0, 200, &eps, &s).unwrap();
        for (o, e) in out.flat().iter().zip(eps.flat()) {
            assert!((o - e).abs() < 2e-3);
        }
    }

    #[test]
    fn forward_noise_out_of_range_step_is_rejected() {
        let s = make_schedule(5, 1e-4, 0.02).unwrap();
        let a = ActionChunk::zeros(2);
        assert!(forward_noise(&a, 6, &a.clone(), &s).is_err());
    }

    #[test]
    fn eq3_coefficients_partition_unity() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        for k in 0..=50 {
            let ab = s.alpha_bar(k);
            let sum = ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2);
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_noise_statistics_small() {
        // Quick Monte-Carlo sanity at k = K/2 (the acceptance suite
        // runs the full-size version).
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let k = 25;
        let a0 = ActionChunk::from_flat(1, vec![0.3, -0.2, 0.8, 0.0, 1.0, -1.0, 0.5, 0.1]).unwrap();
        let mut rng = derive_rng(7, "diff", 2);
        let n = 20_000;
        let mut mean = vec![0.0; ACTION_WIDTH];
        let mut sq = vec![0.0; ACTION_WIDTH];
        for _ in 0..n {
            let eps = ActionChunk::randn(1, &mut rng);
            let out = forward_noise(&a0, k, &eps, &s).unwrap();
            for (i, v) in out.flat().iter().enumerate() {
                mean[i] += v;
                sq[i] += v * v;
            }
        }
        let ab = s.alpha_bar(k);
        for i in 0..ACTION_WIDTH {
            let m = mean[i] / n as f64;
            let var = sq[i] / n as f64 - m * m;
            assert!((m - ab.sqrt() * a0.flat()[i]).abs() < 0.02);
            assert!((var - (1.0 - ab)).abs() < 0.02);
        }
    }

    #[test]
    fn noise_loss_basics() {
        assert_eq!(noise_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(noise_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(noise_loss(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = derive_rng(7, "diff", 3);
        let pred = Tensor::<f64>::randn(vec![2, 4], &mut rng);
        let target = Tensor::<f64>::randn(vec![2, 4], &mut rng);
        let (_, grad) = mse_with_grad(&pred, &target).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut p = pred.clone();
            p.data_mut()[i] += h;
            let (lp, _) = mse_with_grad(&p, &target).unwrap();
            p.data_mut()[i] -= 2.0 * h;
            let (lm, _) = mse_with_grad(&p, &target).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let ad = grad.data()[i];
            assert!(
                (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6) <= 1e-6,
                "i={i} fd={fd} ad={ad}"
            );
        }
    }

    #[test]
    fn single_step_sampler_with_zero_denoiser_matches_hand_update() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        let zero = |a: &Tensor<f64>, _k: usize, _f: &Tensor<f64>| -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(a.shape().to_vec()))
        };
        let f_a = Tensor::<f64>::zeros(vec![1, 1]);
        let out = denoise_sample(&zero, &f_a, &s, 8, &mut derive_rng(7, "diff", 4)).unwrap();
        // The initial a^1 uses the same draw sequence.
        let mut rng = derive_rng(7, "diff", 4);
        let a1: Vec<f64> = (0..8)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (o, a) in out.data().iter().zip(&a1) {
            assert!((o - a / (1.0f64 - 0.5).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_is_deterministic_under_seed() {
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let ident = |a: &Tensor<f32>, _k: usize, _f: &Tensor<f32>| -> Result<Tensor<f32>> {
            Ok(a.scale(0.1))
        };
        let f_a = Tensor::<f32>::zeros(vec![1, 4]);
        let a = denoise_sample(&ident, &f_a, &s, 16, &mut derive_rng(7, "diff", 5)).unwrap();
        let b = denoise_sample(&ident, &f_a, &s, 16, &mut derive_rng(7, "diff", 5)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[1, 16]);
    }

    #[test]
    fn diverging_predictor_reports_step_index() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let bad = |a: &Tensor<f64>, _k: usize, _f: &Tensor<f64>| -> Result<Tensor<f64>> {
            Ok(a.map(|_| f64::NAN))
        };
        let f_a = Tensor::<f64>::zeros(vec![1, 1]);
        match denoise_sample(&bad, &f_a, &s, 8, &mut derive_rng(7, "diff", 6)) {
            Err(Error::DivergedSampler { step }) => assert_eq!(step, 10),
            other => panic!("expected diverged sampler, got {other:?}"),
        }
    }
}
