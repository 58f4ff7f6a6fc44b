use esd_core::autodiff::Tensor;
use esd_core::denoiser::{apply_condition_dropout, ConditionId};
use esd_core::diffusion::{q_sample, NoiseSchedule};
use esd_core::rng::{gaussian, Purpose, SeedStream};

fn column_moments(x: &Tensor, col: usize) -> (f64, f64) {
    let n = x.shape()[0] as f64;
    let vals: Vec<f64> = (0..x.shape()[0])
        .map(|i| f64::from(x.row(i)[col]))
        .collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn forward_process_marginal_moments() {
    let sched = NoiseSchedule::linear(100, 1e-4, 0.1).unwrap();
    let n = 100_000;
    let x0 = Tensor::new(vec![n, 2], [1.5f32, -2.0].repeat(n)).unwrap();
    let mut rng = SeedStream::new(11).rng(Purpose::Sampling, 0);
    for t in [1, 10, 50, 100] {
        let noise = gaussian(&mut rng, &[n, 2]);
        let x_t = q_sample(&x0, t, &noise, &sched).unwrap();
        let ab = sched.alpha_bar(t);
        for (col, v) in [1.5f64, -2.0].into_iter().enumerate() {
            let (mean, var) = column_moments(&x_t, col);
            let sd = (1.0 - ab).sqrt();
            assert!(
                (mean - ab.sqrt() * v).abs() < 4.0 * sd / (n as f64).sqrt(),
                "t={t} mean {mean}"
            );
            assert!(
                (var - (1.0 - ab)).abs() < 4.0 * (1.0 - ab) * (2.0 / n as f64).sqrt(),
                "t={t} var {var}"
            );
        }
    }
}

#[test]
fn condition_dropout_rate() {
    let mut rng = SeedStream::new(5).rng(Purpose::Training, 0);
    let labels = vec![ConditionId::Label(2); 10_000];
    let out = apply_condition_dropout(&labels, 0.1, &mut rng);
    let dropped = out.iter().filter(|c| c.is_null()).count() as f64 / 10_000.0;
    assert!((0.08..=0.12).contains(&dropped), "{dropped}");
    assert!(out
        .iter()
        .all(|&c| c == ConditionId::Null || c == ConditionId::Label(2)));
    assert_eq!(apply_condition_dropout(&labels, 0.0, &mut rng), labels);
}
