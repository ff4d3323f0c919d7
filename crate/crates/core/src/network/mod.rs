//! Split-stream detection network: per-stream channel mixing and strided
//! conv/BN/ReLU blocks, feature concatenation, a bidirectional GRU,
//! additive attention and classification/localization heads, with exact
//! gradients for every layer.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod gru;
pub mod heads;
pub mod model;
pub mod params;

pub use checkpoint::Checkpoint;
pub use config::{HeadVariant, ModelConfig, StreamConfig};
pub use model::{softmax_rows, ForwardCache, ModelInput, Network, NetworkOutput};
pub use params::{model_init, Params, Tensor, TensorRole};

/// Batch-norm behaviour: per-segment statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::WindowClassConfig;
    use crate::signal_io::EventClass;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(head: HeadVariant) -> ModelConfig {
        ModelConfig {
            windows: vec![
                WindowClassConfig::half_overlap(EventClass::Ar, 0.5),
                WindowClassConfig::half_overlap(EventClass::LM, 0.25),
                WindowClassConfig::half_overlap(EventClass::SDB, 1.0),
            ],
            base_filters: 2,
            num_blocks: 2,
            gru_hidden: 4,
            attention_hidden: 4,
            segment_samples: 256,
            head,
            ..ModelConfig::default()
        }
    }

    fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelInput<f64> {
        ModelInput {
            streams: cfg
                .streams
                .iter()
                .map(|s| {
                    (0..s.channels * cfg.segment_samples)
                        .map(|_| rng.random_range(-2.0..2.0))
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn output_shapes_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for head in [HeadVariant::Dense, HeadVariant::Depthwise] {
            for (f0, k, nh) in [(2, 2, 4), (4, 3, 8), (2, 4, 16)] {
                let cfg = ModelConfig {
                    base_filters: f0,
                    num_blocks: k,
                    gru_hidden: nh,
                    ..tiny(head)
                };
                let net = Network::new(cfg.clone()).unwrap();
                let params: Params<f64> = model_init(&cfg, &mut rng);
                let x = random_input(&cfg, &mut rng);
                let (out, cache) = net.forward(&params, &x, Mode::Training).unwrap();
                assert_eq!(out.logits.len(), net.grid.len() * 4);
                assert_eq!(out.loc.len(), net.grid.len() * 2);
                assert_eq!(cache.context().len(), 2 * nh * 4);
                assert_eq!(cache.attention_weights().len(), (256 >> k) * 4);
                for j in 0..out.num_windows {
                    let s: f64 = out.prob_row(j).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn initial_output_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny(HeadVariant::Dense);
        let net = Network::new(cfg.clone()).unwrap();
        let params: Params<f64> = model_init(&cfg, &mut rng);
        let (out, _) = net
            .forward(&params, &random_input(&cfg, &mut rng), Mode::Training)
            .unwrap();
        let mean_entropy: f64 = (0..out.num_windows)
            .map(|j| -out.prob_row(j).iter().map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / out.num_windows as f64;
        assert!(mean_entropy > 0.8 * 4f64.ln(), "entropy {mean_entropy}");
    }

    #[test]
    fn inference_is_deterministic_and_streams_are_coupled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny(HeadVariant::Dense);
        let net = Network::new(cfg.clone()).unwrap();
        let params: Params<f64> = model_init(&cfg, &mut rng);
        let x = random_input(&cfg, &mut rng);
        let (a, _) = net.forward(&params, &x, Mode::Inference).unwrap();
        let (b, _) = net.forward(&params, &x, Mode::Inference).unwrap();
        assert_eq!(a, b);
        let mut ablated = x.clone();
        ablated.streams[1].iter_mut().for_each(|v| *v = 0.0);
        let (c, _) = net.forward(&params, &ablated, Mode::Inference).unwrap();
        assert_ne!(a.logits, c.logits);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let cfg = tiny(HeadVariant::Dense);
        let net = Network::new(cfg.clone()).unwrap();
        let params: Params<f64> = model_init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let x = ModelInput {
            streams: vec![vec![0.0; 5 * 256], vec![0.0; 2 * 256]],
        };
        assert!(net.forward(&params, &x, Mode::Training).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny(HeadVariant::Depthwise);
        let net = Network::new(cfg.clone()).unwrap();
        let params: Params<f64> = model_init(&cfg, &mut rng);
        let x = random_input(&cfg, &mut rng);
        let (out, cache) = net.forward(&params, &x, Mode::Training).unwrap();
        let mut grads = params.zeros_like();
        net.backward(
            &params,
            &x,
            &cache,
            &vec![0.0; out.logits.len()],
            &vec![0.0; out.loc.len()],
            &mut grads,
        );
        assert_eq!(grads.l2_norm_sq(), 0.0);
    }

    /// Central differences of a random linear functional of both outputs.
    fn gradient_check(head: HeadVariant, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = tiny(head);
        let net = Network::new(cfg.clone()).unwrap();
        let params: Params<f64> = model_init(&cfg, &mut rng);
        let x = random_input(&cfg, &mut rng);
        let (out, cache) = net.forward(&params, &x, Mode::Training).unwrap();
        let ws: Vec<f64> = (0..out.logits.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wy: Vec<f64> = (0..out.loc.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &Params<f64>| -> f64 {
            let (o, _) = net.forward(p, &x, Mode::Training).unwrap();
            o.logits.iter().zip(&ws).map(|(a, b)| a * b).sum::<f64>()
                + o.loc.iter().zip(&wy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grads = params.zeros_like();
        net.backward(&params, &x, &cache, &ws, &wy, &mut grads);
        let analytic: Vec<(String, Vec<f64>)> = grads
            .named_tensors()
            .into_iter()
            .filter(|(_, _, r)| *r == TensorRole::Trainable)
            .map(|(n, t, _)| (n, t.data.clone()))
            .collect();
        let h = 1e-5;
        for (ti, (name, a)) in analytic.iter().enumerate() {
            let mut num = vec![0.0; a.len()];
            for i in 0..a.len() {
                let mut p = params.clone();
                p.trainable_mut()[ti].data[i] += h;
                let fp = objective(&p);
                p.trainable_mut()[ti].data[i] -= 2.0 * h;
                let fm = objective(&p);
                num[i] = (fp - fm) / (2.0 * h);
            }
            let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let scale: f64 =
                a.iter().map(|x| x * x).sum::<f64>().sqrt() + num.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rel = if scale == 0.0 { 0.0 } else { diff / scale };
            assert!(rel < 1e-4, "{name}: relative error {rel}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_dense() {
        gradient_check(HeadVariant::Dense, 6);
    }

    #[test]
    fn gradients_match_finite_differences_depthwise() {
        gradient_check(HeadVariant::Depthwise, 7);
    }

    #[test]
    fn running_stats_used_at_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny(HeadVariant::Dense);
        let net = Network::new(cfg.clone()).unwrap();
        let mut params: Params<f64> = model_init(&cfg, &mut rng);
        let x = random_input(&cfg, &mut rng);
        let (_, cache) = net.forward(&params, &x, Mode::Training).unwrap();
        let before = params.clone();
        net.update_running_stats(&mut params, &cache);
        assert_ne!(before, params);
        let (a, _) = net.forward(&before, &x, Mode::Inference).unwrap();
        let (b, _) = net.forward(&params, &x, Mode::Inference).unwrap();
        assert_ne!(a.logits, b.logits);
    }
}
