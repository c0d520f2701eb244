//! Noise schedules, closed-form forward noising and deterministic DDIM sampling.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::LatentMask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled-linear" => Ok(Self::ScaledLinear),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Serializable description of a schedule, stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn linear(steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.kind, self.beta_start, self.beta_end)
    }
}

/// β, α and ᾱ tables for steps `1..=K`; index 0 of `alpha_bar` holds ᾱ_0 = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_k for `1 <= k <= K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta(k)
    }

    /// ᾱ_k for `0 <= k <= K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::Domain(format!("diffusion step {k} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs K >= 1".into()));
    }
    let frac = |i: usize| if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
    let betas = (0..steps)
        .map(|i| match kind {
            ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
            ScheduleKind::ScaledLinear => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (a + (b - a) * frac(i)).powi(2)
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// `z_k = √ᾱ_k · z0 + √(1 − ᾱ_k) · e`.
pub fn add_noise(z0: &Tensor, k: usize, e: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(k)?;
    if z0.dims() != e.dims() {
        return Err(Error::Shape(format!("latent {:?} vs noise {:?}", z0.dims(), e.dims())));
    }
    let ab = sched.alpha_bar(k);
    Ok(((z0 * ab.sqrt())? + (e * (1.0 - ab).sqrt())?)?)
}

/// Batched [`add_noise`] with one step per leading-dimension item.
pub fn add_noise_batch(z0: &Tensor, ks: &[usize], e: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != e.dims() || z0.dim(0)? != ks.len() {
        return Err(Error::Shape(format!("latent {:?}, noise {:?}, {} steps", z0.dims(), e.dims(), ks.len())));
    }
    for &k in ks {
        sched.check_step(k)?;
    }
    let mut coef_shape = vec![1usize; z0.rank()];
    coef_shape[0] = ks.len();
    let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = ks.iter().map(|&k| f(sched.alpha_bar(k))).collect();
        Ok(Tensor::from_vec(v, coef_shape.as_slice(), &Device::Cpu)?.to_dtype(z0.dtype())?)
    };
    let a = coef(&|ab| ab.sqrt())?;
    let b = coef(&|ab| (1.0 - ab).sqrt())?;
    Ok((z0.broadcast_mul(&a)? + e.broadcast_mul(&b)?)?)
}

/// The mask pushed through the same forward process and noise as the latent.
pub fn noised_mask(m: &LatentMask, k: usize, e: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let dims = m.dims();
    if e.dims() != [dims.0, dims.1, dims.2, dims.3] {
        return Err(Error::Shape(format!("mask {dims:?} vs noise {:?}", e.dims())));
    }
    add_noise(&m.to_tensor()?.to_dtype(e.dtype())?, k, e, sched)
}

/// Clean-sample estimate `ẑ₀ = (z_k − √(1−ᾱ_k)·ê) / √ᾱ_k`.
pub fn predict_x0(z_k: &Tensor, k: usize, e_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(k)?;
    let ab = sched.alpha_bar(k);
    Ok(((z_k - (e_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

/// One deterministic DDIM transition from `k` to `k_prev` (η = 0).
pub fn ddim_step(z_k: &Tensor, k: usize, k_prev: usize, e_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if k_prev >= k {
        return Err(Error::Domain(format!("DDIM step must descend, got {k} -> {k_prev}")));
    }
    let x0 = predict_x0(z_k, k, e_hat, sched)?;
    let ab = sched.alpha_bar(k_prev);
    Ok(((x0 * ab.sqrt())? + (e_hat * (1.0 - ab).sqrt())?)?)
}

/// Runs DDIM over a strictly descending step list, finishing at step 0.
/// `denoiser(z_k, k)` returns the predicted noise.
pub fn ddim_sample(
    z_start: &Tensor,
    mut denoiser: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    steps: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    for w in steps.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Domain(format!("step list not strictly descending at {} -> {}", w[0], w[1])));
        }
    }
    for &k in steps {
        sched.check_step(k)?;
    }
    let mut z = z_start.clone();
    for (i, &k) in steps.iter().enumerate() {
        let k_prev = steps.get(i + 1).copied().unwrap_or(0);
        let e_hat = denoiser(&z, k)?;
        z = ddim_step(&z, k, k_prev, &e_hat, sched)?;
    }
    Ok(z)
}

/// `n` evenly spaced steps from `round(strength · K)` down to 1.
pub fn inference_steps(total: usize, n: usize, strength: f64) -> Result<Vec<usize>> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::Config(format!("noise strength {strength} outside (0, 1]")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let start = ((strength * total as f64).round() as usize).clamp(1, total);
    if n >= start {
        return Ok((1..=start).rev().collect());
    }
    if n == 1 {
        return Ok(vec![start]);
    }
    let span = (start - 1) as f64;
    let mut out: Vec<usize> = (0..n)
        .map(|i| start - (i as f64 * span / (n - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn v(t: &Tensor) -> Vec<f64> {
        t.to_vec1::<f64>().unwrap()
    }

    #[test]
    fn analytic_tables() {
        let s = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        let s = NoiseSchedule::from_betas(vec![0.5; 4]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25, 0.125, 0.0625]);
        assert!(NoiseSchedule::from_betas(vec![1.0]).is_err());
        assert!("cosine".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn schedules_are_monotone() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            for steps in [1, 2, 10, 200, 1000] {
                let s = make_schedule(steps, kind, 1e-4, 2e-2).unwrap();
                let ab = s.alpha_bars();
                assert!(ab.iter().all(|a| *a > 0.0 && *a < 1.0));
                for w in ab.windows(2) {
                    assert!(w[1] < w[0]);
                }
            }
        }
        let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 2e-2).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-15 && (s.beta(1000) - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn add_noise_cases() {
        let s = NoiseSchedule::from_betas(vec![0.5; 4]).unwrap();
        let z0 = t(&[1.0, -2.0, 0.5]);
        let e = t(&[0.3, 0.1, -1.0]);
        let zk = v(&add_noise(&z0, 2, &e, &s).unwrap());
        for i in 0..3 {
            let want = 0.5 * v(&z0)[i] + 0.75f64.sqrt() * v(&e)[i];
            assert!((zk[i] - want).abs() < 1e-15);
        }
        let zero = t(&[0.0; 3]);
        let got = v(&add_noise(&z0, 3, &zero, &s).unwrap());
        assert!(got.iter().zip(v(&z0)).all(|(g, z)| (g - 0.125f64.sqrt() * z).abs() < 1e-15));
        assert!(matches!(add_noise(&z0, 0, &e, &s), Err(Error::Domain(_))));
        assert!(matches!(add_noise(&z0, 5, &e, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn batch_matches_single() {
        let s = make_schedule(50, ScheduleKind::Linear, 1e-4, 2e-2).unwrap();
        let z0 = Tensor::arange(0f64, 12.0, &Device::Cpu).unwrap().reshape((3, 2, 2)).unwrap();
        let e = (z0.ones_like().unwrap() * 0.7).unwrap();
        let ks = [1, 20, 50];
        let b = add_noise_batch(&z0, &ks, &e, &s).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            let one = add_noise(&z0.get(i).unwrap(), k, &e.get(i).unwrap(), &s).unwrap();
            let diff = (b.get(i).unwrap() - one).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-14);
        }
    }

    #[test]
    fn noised_mask_cases() {
        let s = NoiseSchedule::from_betas(vec![0.5; 4]).unwrap();
        let dims = (1, 1, 2, 2);
        let zero_e = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let ones = noised_mask(&LatentMask::ones(dims), 2, &zero_e, &s).unwrap();
        assert!(ones.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|x| (*x - 0.5).abs() < 1e-15));
        let zeros = LatentMask::new(dims, vec![0.0; 4]).unwrap();
        let z = noised_mask(&zeros, 2, &zero_e, &s).unwrap();
        assert!(z.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|x| *x == 0.0));
        let bad_e = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(noised_mask(&zeros, 2, &bad_e, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn ddim_step_cases() {
        let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 2e-2).unwrap();
        let z = t(&[0.4, -1.2]);
        let zero = t(&[0.0, 0.0]);
        let got = v(&ddim_step(&z, 30, 10, &zero, &s).unwrap());
        let ratio = (s.alpha_bar(10) / s.alpha_bar(30)).sqrt();
        assert!((got[0] - 0.4 * ratio).abs() < 1e-14 && (got[1] + 1.2 * ratio).abs() < 1e-14);
        let e = t(&[0.9, -0.3]);
        let zk = add_noise(&z, 30, &e, &s).unwrap();
        let x0 = v(&predict_x0(&zk, 30, &e, &s).unwrap());
        assert!((x0[0] - 0.4).abs() < 1e-14 && (x0[1] + 1.2).abs() < 1e-14);
        assert!(matches!(ddim_step(&z, 10, 10, &zero, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn ddim_sample_with_exact_noise_recovers_start() {
        let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 2e-2).unwrap();
        let z0 = t(&[0.3, -0.7, 1.0, 0.0]);
        let e = t(&[1.1, -0.4, 0.2, 2.0]);
        let steps = inference_steps(1000, 50, 1.0).unwrap();
        assert_eq!(steps.len(), 50);
        let zk = add_noise(&z0, steps[0], &e, &s).unwrap();
        let out = ddim_sample(&zk, |_, _| Ok(e.clone()), &steps, &s).unwrap();
        for (a, b) in v(&out).iter().zip(v(&z0)) {
            assert!((a - b).abs() <= 1e-5);
        }
        assert!(ddim_sample(&zk, |_, _| Ok(e.clone()), &[5, 7], &s).is_err());
    }

    #[test]
    fn inference_step_lists() {
        assert_eq!(inference_steps(200, 4, 1.0).unwrap(), vec![200, 134, 67, 1]);
        assert_eq!(inference_steps(10, 20, 1.0).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(inference_steps(200, 25, 0.3).unwrap()[0], 60);
        assert!(inference_steps(200, 0, 0.3).unwrap().is_empty());
        assert!(inference_steps(200, 5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn add_noise_is_affine(a in -3.0f64..3.0, b in -3.0f64..3.0, k in 1usize..=40) {
            let s = make_schedule(40, ScheduleKind::ScaledLinear, 1e-4, 2e-2).unwrap();
            let z1 = t(&[0.2, -1.0]);
            let z2 = t(&[1.5, 0.3]);
            let e1 = t(&[0.7, 0.1]);
            let e2 = t(&[-0.4, 2.0]);
            let mix = |x: &Tensor, y: &Tensor| ((x * a).unwrap() + (y * b).unwrap()).unwrap();
            let lhs = v(&add_noise(&mix(&z1, &z2), k, &mix(&e1, &e2), &s).unwrap());
            let r1 = v(&add_noise(&z1, k, &e1, &s).unwrap());
            let r2 = v(&add_noise(&z2, k, &e2, &s).unwrap());
            for i in 0..2 {
                prop_assert!((lhs[i] - (a * r1[i] + b * r2[i])).abs() < 1e-12);
            }
        }
    }
}
