//! Full forward and backward passes.

use super::attention::{attention_backward, attention_forward, AttentionCache};
use super::config::ModelConfig;
use super::conv::{
    channel_mixing, channel_mixing_backward, conv_block_backward, conv_block_forward, update_running_stats, ConvCache,
};
use super::gru::{gru_backward, gru_forward, GruCache};
use super::heads::{heads_backward, heads_forward};
use super::params::Params;
use super::Mode;
use crate::error::{Error, Result};
use crate::geometry::WindowGrid;
use crate::scalar::Scalar;

/// Per-stream network inputs, each `C_s x T` channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<S> {
    pub streams: Vec<Vec<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput<S> {
    pub num_windows: usize,
    pub num_labels: usize,
    /// `N_d x K` class logits.
    pub logits: Vec<S>,
    /// `N_d x 2` encoded localization.
    pub loc: Vec<S>,
    /// Row-wise softmax of `logits`.
    pub probs: Vec<S>,
}

impl<S: Scalar> NetworkOutput<S> {
    pub fn logit_row(&self, j: usize) -> &[S] {
        &self.logits[j * self.num_labels..(j + 1) * self.num_labels]
    }

    pub fn prob_row(&self, j: usize) -> &[S] {
        &self.probs[j * self.num_labels..(j + 1) * self.num_labels]
    }

    pub fn loc_row(&self, j: usize) -> [S; 2] {
        [self.loc[2 * j], self.loc[2 * j + 1]]
    }
}

/// Numerically stable softmax of each `labels`-wide row.
pub fn softmax_rows<S: Scalar>(logits: &[S], labels: usize) -> Vec<S> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(labels) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    mixed: Vec<Vec<S>>,
    blocks: Vec<Vec<ConvCache<S>>>,
    /// `T' x F` fused features, time-major.
    fused: Vec<S>,
    gru_forward: GruCache<S>,
    gru_backward: GruCache<S>,
    /// `T' x 2H` recurrent outputs.
    hidden: Vec<S>,
    attention: AttentionCache<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Attention weights, `T' x K`.
    pub fn attention_weights(&self) -> &[S] {
        &self.attention.alpha
    }

    /// Context tensor, `2H x K`.
    pub fn context(&self) -> &[S] {
        &self.attention.context
    }

    /// BN outputs before ReLU for every block of every stream.
    pub fn pre_activations(&self, params: &Params<S>) -> Vec<Vec<Vec<S>>> {
        self.blocks
            .iter()
            .zip(&params.streams)
            .map(|(caches, sp)| {
                caches
                    .iter()
                    .zip(&sp.blocks)
                    .map(|(c, p)| c.pre_activation(p))
                    .collect()
            })
            .collect()
    }
}

/// Configuration plus its default-window grid.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub grid: WindowGrid,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        Ok(Network { config, grid })
    }

    fn check_input<S: Scalar>(&self, input: &ModelInput<S>) -> Result<()> {
        let cfg = &self.config;
        if input.streams.len() != cfg.streams.len() {
            return Err(Error::Shape(format!(
                "expected {} input streams, got {}",
                cfg.streams.len(),
                input.streams.len()
            )));
        }
        for (i, (x, s)) in input.streams.iter().zip(&cfg.streams).enumerate() {
            let want = s.channels * cfg.segment_samples;
            if x.len() != want {
                return Err(Error::Shape(format!(
                    "stream {i} has {} values, expected {} channels x {} samples",
                    x.len(),
                    s.channels,
                    cfg.segment_samples
                )));
            }
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(
        &self,
        params: &Params<S>,
        input: &ModelInput<S>,
        mode: Mode,
    ) -> Result<(NetworkOutput<S>, ForwardCache<S>)> {
        self.check_input(input)?;
        let cfg = &self.config;
        let t_red = cfg.reduced_len();
        let per_stream = cfg.stream_features();
        let features = cfg.fused_features();

        let mut mixed = Vec::with_capacity(cfg.streams.len());
        let mut blocks = Vec::with_capacity(cfg.streams.len());
        let mut fused = vec![S::zero(); t_red * features];
        for (si, (x, sp)) in input.streams.iter().zip(&params.streams).enumerate() {
            let c = cfg.streams[si].channels;
            let m = channel_mixing(x, c, &sp.mix_weight.data, &sp.mix_bias.data);
            let mut caches: Vec<ConvCache<S>> = Vec::with_capacity(sp.blocks.len());
            let mut f_in = c;
            for bp in &sp.blocks {
                let src = caches.last().map_or(&m, |cc| &cc.out);
                let cache = conv_block_forward(src, f_in, bp, mode);
                f_in = cache.f_out;
                caches.push(cache);
            }
            let out = &caches.last().expect("at least one block").out;
            for f in 0..per_stream {
                for t in 0..t_red {
                    fused[t * features + si * per_stream + f] = out[f * t_red + t];
                }
            }
            mixed.push(m);
            blocks.push(caches);
        }

        let hd = cfg.gru_hidden;
        let gf = gru_forward(&fused, features, &params.gru_forward, false);
        let gb = gru_forward(&fused, features, &params.gru_backward, true);
        let dim = 2 * hd;
        let mut hidden = vec![S::zero(); t_red * dim];
        for t in 0..t_red {
            hidden[t * dim..t * dim + hd].copy_from_slice(&gf.states[t * hd..(t + 1) * hd]);
            hidden[t * dim + hd..(t + 1) * dim].copy_from_slice(&gb.states[t * hd..(t + 1) * hd]);
        }
        let attention = attention_forward(&hidden, dim, &params.attention);
        let labels = cfg.num_labels();
        let (logits, loc) = heads_forward(&attention.context, dim, labels, &self.grid.class_ranges, &params.head);
        if logits.iter().chain(&loc).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        let probs = softmax_rows(&logits, labels);
        let output = NetworkOutput {
            num_windows: self.grid.len(),
            num_labels: labels,
            logits,
            loc,
            probs,
        };
        let cache = ForwardCache {
            mixed,
            blocks,
            fused,
            gru_forward: gf,
            gru_backward: gb,
            hidden,
            attention,
        };
        Ok((output, cache))
    }

    /// Accumulates parameter gradients into `grads` given the loss gradients
    /// w.r.t. the logits (`N_d x K`) and localization (`N_d x 2`).
    pub fn backward<S: Scalar>(
        &self,
        params: &Params<S>,
        input: &ModelInput<S>,
        cache: &ForwardCache<S>,
        d_logits: &[S],
        d_loc: &[S],
        grads: &mut Params<S>,
    ) {
        let cfg = &self.config;
        let t_red = cfg.reduced_len();
        let per_stream = cfg.stream_features();
        let features = cfg.fused_features();
        let hd = cfg.gru_hidden;
        let dim = 2 * hd;
        let labels = cfg.num_labels();

        let d_context = heads_backward(
            &cache.attention.context,
            dim,
            labels,
            &self.grid.class_ranges,
            &params.head,
            d_logits,
            d_loc,
            &mut grads.head,
        );
        let d_hidden = attention_backward(
            &cache.hidden,
            &cache.attention,
            &params.attention,
            &d_context,
            &mut grads.attention,
        );

        let mut d_fused = vec![S::zero(); t_red * features];
        gru_backward(
            &cache.fused,
            features,
            &cache.gru_forward,
            &params.gru_forward,
            |t| d_hidden[t * dim..t * dim + hd].to_vec(),
            &mut grads.gru_forward,
            &mut d_fused,
        );
        gru_backward(
            &cache.fused,
            features,
            &cache.gru_backward,
            &params.gru_backward,
            |t| d_hidden[t * dim + hd..(t + 1) * dim].to_vec(),
            &mut grads.gru_backward,
            &mut d_fused,
        );

        for (si, sp) in params.streams.iter().enumerate() {
            let gs = &mut grads.streams[si];
            let mut d_out = vec![S::zero(); per_stream * t_red];
            for f in 0..per_stream {
                for t in 0..t_red {
                    d_out[f * t_red + t] = d_fused[t * features + si * per_stream + f];
                }
            }
            let caches = &cache.blocks[si];
            for (bi, (bc, bp)) in caches.iter().zip(&sp.blocks).enumerate().rev() {
                d_out =
                    conv_block_backward(bc, bp, &d_out, &mut gs.blocks[bi], true).expect("input gradient requested");
            }
            let c = cfg.streams[si].channels;
            channel_mixing_backward(
                &input.streams[si],
                &cache.mixed[si],
                &d_out,
                c,
                &mut gs.mix_weight.data,
                &mut gs.mix_bias.data,
            );
        }
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// averages used at inference.
    pub fn update_running_stats<S: Scalar>(&self, params: &mut Params<S>, cache: &ForwardCache<S>) {
        for (sp, caches) in params.streams.iter_mut().zip(&cache.blocks) {
            for (bp, bc) in sp.blocks.iter_mut().zip(caches) {
                update_running_stats(bp, bc);
            }
        }
    }
}
