//! Scalar linear-Gaussian model with `h(x) = 2x`, checked against an exact
//! Kalman filter: the bound must stay under the true evidence and the
//! particle filter must track the Kalman mean.

use vse_core::mathcore::RngStream;
use vse_core::measurement::{LinearMeasurement, Measurement};
use vse_core::nn::Architecture;
use vse_core::particle_filter::{pf_run, LinearTransition, PfConfig};
use vse_core::vse::{elbo, initial_state, train, TrainConfig, VseModel};

const GAIN: f64 = 2.0;

#[derive(Clone, Copy, Debug)]
struct Toy {
    a: f64,
    q: f64,
    r: f64,
    p0: f64,
}

impl Toy {
    fn random(stream: &mut RngStream) -> Self {
        Self {
            a: -0.95 + 1.9 * stream.uniform(),
            q: 0.1 + 0.9 * stream.uniform(),
            r: 0.2 + 0.8 * stream.uniform(),
            p0: 1.0,
        }
    }

    fn simulate(&self, t_len: usize, stream: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
        let mut x = self.p0.sqrt() * stream.normal();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..t_len {
            x = self.a * x + self.q.sqrt() * stream.normal();
            xs.push(x);
            ys.push(GAIN * x + self.r.sqrt() * stream.normal());
        }
        (xs, ys)
    }

    /// Exact `log p(y_{1:T})` and filtered `(mean, variance)` pairs.
    fn kalman(&self, y: &[f64]) -> (f64, Vec<(f64, f64)>) {
        let (mut m, mut p) = (0.0, self.p0);
        let mut ll = 0.0;
        let mut means = Vec::with_capacity(y.len());
        for &yt in y {
            m *= self.a;
            p = self.a * self.a * p + self.q;
            let s = GAIN * GAIN * p + self.r;
            let innov = yt - GAIN * m;
            ll += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + innov * innov / s);
            let k = GAIN * p / s;
            m += k * innov;
            p *= 1.0 - k * GAIN;
            means.push((m, p));
        }
        (ll, means)
    }
}

fn arch() -> Architecture {
    Architecture {
        input_dim: 1,
        state_dim: 1,
        hidden: 8,
        layers: 1,
        head_width: 8,
    }
}

fn measurement() -> Measurement {
    Measurement::Linear(LinearMeasurement::new(1, 1, vec![GAIN]))
}

fn dataset(toy: &Toy, n: usize, t_len: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            toy.simulate(t_len, &mut RngStream::keyed(seed, 200, 0, i as u32))
                .1
        })
        .collect()
}

/// Mean over sequences of `(log evidence - bound) / T`. A trained model can
/// beat the true evidence on single sequences, so only the average over
/// fresh data is bounded.
fn mean_gap(toy: &Toy, model: &VseModel, seqs: &[Vec<f64>], seed: u64) -> f64 {
    let mut gap = 0.0;
    for (i, y) in seqs.iter().enumerate() {
        let bound = elbo(model, y, &mut RngStream::keyed(seed, 201, 0, i as u32))
            .unwrap()
            .total;
        let (evidence, _) = toy.kalman(y);
        gap += (evidence - bound) / y.len() as f64;
    }
    gap / seqs.len() as f64
}

#[test]
fn kalman_oracle_matches_a_hand_computed_step() {
    let toy = Toy {
        a: 0.5,
        q: 1.0,
        r: 1.0,
        p0: 1.0,
    };
    // Predicted variance 1.25, innovation variance 6.
    let (ll, means) = toy.kalman(&[3.0]);
    let expect = -0.5 * ((2.0 * std::f64::consts::PI * 6.0).ln() + 9.0 / 6.0);
    assert!((ll - expect).abs() < 1e-12);
    assert!((means[0].0 - 1.25).abs() < 1e-12);
    assert!((means[0].1 - 1.25 / 6.0).abs() < 1e-12);
}

#[test]
fn bound_stays_below_the_evidence_at_initialization() {
    let mut pick = RngStream::new(5, 0);
    for k in 0..10u64 {
        let toy = Toy::random(&mut pick);
        let seqs = dataset(&toy, 20, 30, k);
        let refs: Vec<&[f64]> = seqs.iter().map(|v| v.as_slice()).collect();
        let cfg = TrainConfig {
            seed: k,
            ..TrainConfig::default()
        };
        let st = initial_state(arch(), measurement(), toy.r, 4, &refs, &cfg).unwrap();
        let gap = mean_gap(&toy, &st.model, &seqs, k);
        assert!(gap > 0.0);
    }
}

#[test]
fn training_narrows_the_gap() {
    let toy = Toy {
        a: 0.8,
        q: 0.5,
        r: 0.5,
        p0: 1.0,
    };
    let seqs = dataset(&toy, 40, 30, 9);
    let refs: Vec<&[f64]> = seqs.iter().map(|v| v.as_slice()).collect();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 8,
        learning_rate: 1e-2,
        seed: 9,
        ..TrainConfig::default()
    };
    let st = initial_state(arch(), measurement(), toy.r, 4, &refs, &cfg).unwrap();
    let held = dataset(&toy, 100, 30, 10);
    let before = mean_gap(&toy, &st.model, &held, 1);
    let out = train(&refs, st, &cfg, &mut |_| {}).unwrap();
    let after = mean_gap(&toy, out.state.best_model(), &held, 1);
    assert!(
        after > 0.0 && after < 0.5 * before,
        "gap {before} -> {after}"
    );
}

#[test]
fn particle_filter_tracks_the_kalman_mean() {
    let toy = Toy {
        a: 0.9,
        q: 0.3,
        r: 0.4,
        p0: 1.0,
    };
    let (_, y) = toy.simulate(40, &mut RngStream::new(3, 0));
    let (_, exact) = toy.kalman(&y);
    let trans = LinearTransition {
        dim: 1,
        matrix: vec![toy.a],
        noise_var: toy.q,
    };
    let cfg = PfConfig {
        particles: 10_000,
        init_mean: vec![0.0],
        init_var: toy.p0,
    };
    let est = pf_run(
        &y,
        &cfg,
        &trans,
        &measurement(),
        toy.r,
        &mut RngStream::new(4, 0),
    )
    .unwrap();
    // Resampling keeps the effective size above P/2, so the standard error of
    // the weighted mean is at most sqrt(2 var / P).
    for (t, (&e, &(m, v))) in est.iter().zip(&exact).enumerate() {
        let se = (2.0 * v / cfg.particles as f64).sqrt();
        assert!((e - m).abs() < 3.0 * se, "t={t}: {e} vs {m} (se {se})");
    }
}
