use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::config::{HeadVariant, ModelConfig};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = S::zero());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams<S> {
    /// `f_out x f_in x 3`
    pub kernel: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams<S> {
    /// `C x C` channel-mixing weights.
    pub mix_weight: Tensor<S>,
    pub mix_bias: Tensor<S>,
    pub blocks: Vec<ConvBlockParams<S>>,
}

/// One GRU direction. Gate rows are stacked as `[update; reset; candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<S> {
    /// `3H x F`
    pub w_input: Tensor<S>,
    pub b_input: Tensor<S>,
    /// `3H x H`
    pub w_hidden: Tensor<S>,
    pub b_hidden: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<S> {
    /// `2H x n_a`
    pub w_hidden: Tensor<S>,
    /// `n_a x K`
    pub w_score: Tensor<S>,
}

/// Affine classification and localization maps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBlock<S> {
    /// `(n K) x in`
    pub clf_weight: Tensor<S>,
    pub clf_bias: Tensor<S>,
    /// `(n 2) x in`
    pub loc_weight: Tensor<S>,
    pub loc_bias: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams<S> {
    /// One block over the flattened `2H * K` context for all windows.
    Dense(HeadBlock<S>),
    /// One block per detected class over that class's `2H` context column.
    Depthwise(Vec<HeadBlock<S>>),
}

/// Whether a tensor is optimized or is a running statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub streams: Vec<StreamParams<S>>,
    pub gru_forward: GruParams<S>,
    pub gru_backward: GruParams<S>,
    pub attention: AttentionParams<S>,
    pub head: HeadParams<S>,
}

macro_rules! visit_tensors {
    ($self:ident, $out:ident, $iter:ident, $($r:tt)+) => {{
        for (si, s) in $self.streams.$iter().enumerate() {
            $out.push((format!("stream{si}.mix_weight"), $($r)+ s.mix_weight, TensorRole::Trainable));
            $out.push((format!("stream{si}.mix_bias"), $($r)+ s.mix_bias, TensorRole::Trainable));
            for (bi, b) in s.blocks.$iter().enumerate() {
                $out.push((format!("stream{si}.block{bi}.kernel"), $($r)+ b.kernel, TensorRole::Trainable));
                $out.push((format!("stream{si}.block{bi}.gamma"), $($r)+ b.gamma, TensorRole::Trainable));
                $out.push((format!("stream{si}.block{bi}.beta"), $($r)+ b.beta, TensorRole::Trainable));
                $out.push((format!("stream{si}.block{bi}.running_mean"), $($r)+ b.running_mean, TensorRole::Buffer));
                $out.push((format!("stream{si}.block{bi}.running_var"), $($r)+ b.running_var, TensorRole::Buffer));
            }
        }
        for (name, g) in [("gru_forward", $($r)+ $self.gru_forward), ("gru_backward", $($r)+ $self.gru_backward)] {
            $out.push((format!("{name}.w_input"), $($r)+ g.w_input, TensorRole::Trainable));
            $out.push((format!("{name}.b_input"), $($r)+ g.b_input, TensorRole::Trainable));
            $out.push((format!("{name}.w_hidden"), $($r)+ g.w_hidden, TensorRole::Trainable));
            $out.push((format!("{name}.b_hidden"), $($r)+ g.b_hidden, TensorRole::Trainable));
        }
        $out.push(("attention.w_hidden".to_string(), $($r)+ $self.attention.w_hidden, TensorRole::Trainable));
        $out.push(("attention.w_score".to_string(), $($r)+ $self.attention.w_score, TensorRole::Trainable));
        let blocks: Vec<(String, _)> = match $($r)+ $self.head {
            HeadParams::Dense(h) => vec![("head".to_string(), h)],
            HeadParams::Depthwise(hs) => hs.$iter().enumerate().map(|(i, h)| (format!("head{i}"), h)).collect(),
        };
        for (name, h) in blocks {
            $out.push((format!("{name}.clf_weight"), $($r)+ h.clf_weight, TensorRole::Trainable));
            $out.push((format!("{name}.clf_bias"), $($r)+ h.clf_bias, TensorRole::Trainable));
            $out.push((format!("{name}.loc_weight"), $($r)+ h.loc_weight, TensorRole::Trainable));
            $out.push((format!("{name}.loc_bias"), $($r)+ h.loc_bias, TensorRole::Trainable));
        }
    }};
}

impl<S: Scalar> Params<S> {
    /// All tensors with names and roles, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>, TensorRole)> {
        let mut out: Vec<(String, &Tensor<S>, TensorRole)> = Vec::new();
        visit_tensors!(self, out, iter, &);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>, TensorRole)> {
        let mut out: Vec<(String, &mut Tensor<S>, TensorRole)> = Vec::new();
        visit_tensors!(self, out, iter_mut, &mut);
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor<S>> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, _, r)| *r == TensorRole::Trainable)
            .map(|(_, t, _)| t)
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(_, _, r)| *r == TensorRole::Trainable)
            .map(|(_, t, _)| t)
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t, _) in z.named_tensors_mut() {
            t.fill_zero();
        }
        z
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        let conv_block = |b: &ConvBlockParams<S>| ConvBlockParams {
            kernel: b.kernel.cast(),
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
        };
        let gru = |g: &GruParams<S>| GruParams {
            w_input: g.w_input.cast(),
            b_input: g.b_input.cast(),
            w_hidden: g.w_hidden.cast(),
            b_hidden: g.b_hidden.cast(),
        };
        let head_block = |h: &HeadBlock<S>| HeadBlock {
            clf_weight: h.clf_weight.cast(),
            clf_bias: h.clf_bias.cast(),
            loc_weight: h.loc_weight.cast(),
            loc_bias: h.loc_bias.cast(),
        };
        Params {
            streams: self
                .streams
                .iter()
                .map(|s| StreamParams {
                    mix_weight: s.mix_weight.cast(),
                    mix_bias: s.mix_bias.cast(),
                    blocks: s.blocks.iter().map(conv_block).collect(),
                })
                .collect(),
            gru_forward: gru(&self.gru_forward),
            gru_backward: gru(&self.gru_backward),
            attention: AttentionParams {
                w_hidden: self.attention.w_hidden.cast(),
                w_score: self.attention.w_score.cast(),
            },
            head: match &self.head {
                HeadParams::Dense(h) => HeadParams::Dense(head_block(h)),
                HeadParams::Depthwise(hs) => HeadParams::Depthwise(hs.iter().map(head_block).collect()),
            },
        }
    }

    /// Sum of squares over trainable tensors.
    pub fn l2_norm_sq(&self) -> f64 {
        self.trainable()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t, _)| t.data.iter().all(|v| v.is_finite()))
    }
}

fn glorot<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape.iter().product::<usize>())
            .map(|_| S::of(dist.sample(rng)))
            .collect(),
    }
}

/// `rows x cols` matrix with orthonormal rows (if `rows <= cols`) or
/// orthonormal columns, from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // `n` vectors of length `m`.
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..n {
        for _ in 0..2 {
            for j in 0..i {
                let proj: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = v.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= proj * b;
                }
            }
        }
        let norm = v[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        v[i].iter_mut().for_each(|a| *a /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { v[r][c] } else { v[c][r] };
        }
    }
    out
}

/// Orthogonal weights; update-gate input biases drawn as `ln U[1, T' - 1]`
/// so that memory timescales span the sequence length.
fn gru_params<S: Scalar, R: Rng + ?Sized>(features: usize, hidden: usize, len: usize, rng: &mut R) -> GruParams<S> {
    let mut w_input = Vec::with_capacity(3 * hidden * features);
    let mut w_hidden = Vec::with_capacity(3 * hidden * hidden);
    for _ in 0..3 {
        w_input.extend(orthogonal(hidden, features, rng));
    }
    for _ in 0..3 {
        w_hidden.extend(orthogonal(hidden, hidden, rng));
    }
    GruParams {
        w_input: Tensor {
            shape: vec![3 * hidden, features],
            data: w_input.into_iter().map(S::of).collect(),
        },
        b_input: Tensor {
            shape: vec![3 * hidden],
            data: (0..3 * hidden)
                .map(|i| {
                    if i < hidden && len > 2 {
                        S::of(rng.random_range(1.0..(len - 1) as f64).ln())
                    } else {
                        S::zero()
                    }
                })
                .collect(),
        },
        w_hidden: Tensor {
            shape: vec![3 * hidden, hidden],
            data: w_hidden.into_iter().map(S::of).collect(),
        },
        b_hidden: Tensor::zeros(&[3 * hidden]),
    }
}

fn head_block<S: Scalar, R: Rng + ?Sized>(windows: usize, labels: usize, input: usize, rng: &mut R) -> HeadBlock<S> {
    HeadBlock {
        clf_weight: glorot(&[windows * labels, input], input, windows * labels, rng),
        clf_bias: Tensor::zeros(&[windows * labels]),
        loc_weight: glorot(&[windows * 2, input], input, windows * 2, rng),
        loc_bias: Tensor::zeros(&[windows * 2]),
    }
}

/// Fresh parameters: Glorot-uniform conv/affine weights, orthogonal GRU
/// matrices, zero biases, unit BN scale.
pub fn model_init<S: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Params<S> {
    let streams = config
        .streams
        .iter()
        .map(|s| {
            let c = s.channels;
            let mut f_in = c;
            let blocks = (1..=config.num_blocks)
                .map(|k| {
                    let f_out = config.block_filters(k);
                    let block = ConvBlockParams {
                        kernel: glorot(&[f_out, f_in, 3], f_in * 3, f_out * 3, rng),
                        gamma: Tensor::filled(&[f_out], S::one()),
                        beta: Tensor::zeros(&[f_out]),
                        running_mean: Tensor::zeros(&[f_out]),
                        running_var: Tensor::filled(&[f_out], S::one()),
                    };
                    f_in = f_out;
                    block
                })
                .collect();
            StreamParams {
                mix_weight: glorot(&[c, c], c, c, rng),
                mix_bias: Tensor::zeros(&[c]),
                blocks,
            }
        })
        .collect();
    let features = config.fused_features();
    let hidden = config.gru_hidden;
    let len = config.reduced_len();
    let gru_forward = gru_params(features, hidden, len, rng);
    let gru_backward = gru_params(features, hidden, len, rng);
    let d = config.context_dim();
    let k = config.num_labels();
    let attention = AttentionParams {
        w_hidden: glorot(&[d, config.attention_hidden], d, config.attention_hidden, rng),
        w_score: glorot(&[config.attention_hidden, k], config.attention_hidden, k, rng),
    };
    let grid = config.grid().expect("validated config");
    let head = match config.head {
        HeadVariant::Dense => HeadParams::Dense(head_block(grid.len(), k, d * k, rng)),
        HeadVariant::Depthwise => HeadParams::Depthwise(
            grid.class_ranges
                .iter()
                .map(|r| head_block(r.len(), k, d, rng))
                .collect(),
        ),
    };
    Params {
        streams,
        gru_forward,
        gru_backward,
        attention,
        head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_and_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (r, c) in [(4, 4), (3, 7), (7, 3)] {
            let m = orthogonal(r, c, &mut rng);
            let (n, len, stride_outer, stride_inner) = if r <= c { (r, c, c, 1) } else { (c, r, 1, c) };
            for i in 0..n {
                for j in 0..n {
                    let d: f64 = (0..len)
                        .map(|t| m[i * stride_outer + t * stride_inner] * m[j * stride_outer + t * stride_inner])
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12, "({r},{c}) [{i},{j}] = {d}");
                }
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a: Params<f32> = model_init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b: Params<f32> = model_init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let c: Params<f32> = model_init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bn_and_bias_init() {
        let cfg = ModelConfig::default();
        let p: Params<f64> = model_init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for s in &p.streams {
            assert!(s.mix_bias.data.iter().all(|&v| v == 0.0));
            for b in &s.blocks {
                assert!(b.gamma.data.iter().all(|&v| v == 1.0));
                assert!(b.beta.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn tensor_listing_is_consistent() {
        let cfg = ModelConfig {
            head: HeadVariant::Depthwise,
            ..ModelConfig::default()
        };
        let mut p: Params<f32> = model_init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        let names_mut: Vec<String> = p.named_tensors_mut().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, names_mut);
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"head2.loc_bias".to_string()));
        let buffers = p
            .named_tensors()
            .iter()
            .filter(|(_, _, r)| *r == TensorRole::Buffer)
            .count();
        assert_eq!(buffers, 3 * 4 * 2);
    }
}
