use ndcore::{
    uniform_fan_in, BatchNormStats, Graph, Mode, ParamId, ParamStore, Scalar, Tensor, Var,
};

use super::DaanConfig;
use crate::error::{Error, Result};
use crate::radiosim::{ImageShape, RadioImage};
use crate::seed;

/// Which sub-network a parameter belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Predictor,
    GlobalDisc,
    /// Discriminator of one reference point.
    LocalDisc(usize),
}

#[derive(Copy, Clone, Debug)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    convs: [Affine; 2],
    bn_scale: ParamId,
    bn_shift: ParamId,
}

/// Extractor, predictor and discriminators with their parameters and
/// batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct DaanModel<T> {
    config: DaanConfig,
    input: ImageShape,
    store: ParamStore<T>,
    groups: Vec<ParamGroup>,
    blocks: Vec<ConvBlock>,
    bn_stats: Vec<BatchNormStats<T>>,
    feature: Affine,
    predictor: Vec<Affine>,
    global_disc: Vec<Affine>,
    local_discs: Vec<Vec<Affine>>,
    pub(crate) mu: f64,
    pub(crate) epochs_trained: usize,
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    groups: Vec<ParamGroup>,
    rng: &'a mut seed::Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, value: Tensor<T>, group: ParamGroup) -> ParamId {
        self.groups.push(group);
        self.store.add(name, value)
    }

    fn affine(&mut self, name: &str, shape: &[usize], fan_in: usize, group: ParamGroup) -> Affine {
        let weight = uniform_fan_in(shape, fan_in, self.rng);
        let bias = uniform_fan_in(
            &[shape[if shape.len() == 2 { 1 } else { 0 }]],
            fan_in,
            self.rng,
        );
        Affine {
            weight: self.add(format!("{name}.weight"), weight, group),
            bias: self.add(format!("{name}.bias"), bias, group),
        }
    }

    fn mlp(
        &mut self,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        group: ParamGroup,
    ) -> Vec<Affine> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.affine(&format!("{name}.{i}"), &[w[0], w[1]], w[0], group))
            .collect()
    }
}

/// Spatial size after `blocks` rounds of 2x2 pooling (odd sizes round up).
fn pooled(mut size: usize, blocks: usize) -> usize {
    for _ in 0..blocks {
        size = size.div_ceil(2);
    }
    size
}

impl<T: Scalar> DaanModel<T> {
    pub fn new(config: DaanConfig, input: ImageShape, init_seed: u64) -> Result<Self> {
        config.validate()?;
        if input.is_empty() {
            return Err(Error::invalid(
                "model input",
                "image shape has a zero dimension",
            ));
        }
        let mut rng = seed::rng(init_seed);
        let mut b = Builder {
            store: ParamStore::new(),
            groups: Vec::new(),
            rng: &mut rng,
        };
        let mut blocks = Vec::new();
        let mut bn_stats = Vec::new();
        let mut channels = input.antennas;
        for (i, &out) in config.conv_channels.iter().enumerate() {
            let c0 = b.affine(
                &format!("block{i}.conv0"),
                &[out, channels, 3, 3],
                channels * 9,
                ParamGroup::Extractor,
            );
            let c1 = b.affine(
                &format!("block{i}.conv1"),
                &[out, out, 3, 3],
                out * 9,
                ParamGroup::Extractor,
            );
            let bn_scale = b.add(
                format!("block{i}.bn.scale"),
                Tensor::full(&[out], T::one()),
                ParamGroup::Extractor,
            );
            let bn_shift = b.add(
                format!("block{i}.bn.shift"),
                Tensor::zeros(&[out]),
                ParamGroup::Extractor,
            );
            blocks.push(ConvBlock {
                convs: [c0, c1],
                bn_scale,
                bn_shift,
            });
            bn_stats.push(BatchNormStats::new(out));
            channels = out;
        }
        let n_blocks = config.conv_channels.len();
        let flat = channels * pooled(input.frames, n_blocks) * pooled(input.subcarriers, n_blocks);
        let fd = config.feature_dim;
        let feature = b.affine("feature", &[flat, fd], flat, ParamGroup::Extractor);
        let predictor = b.mlp(
            "predictor",
            fd,
            &config.predictor_hidden,
            config.num_rps,
            ParamGroup::Predictor,
        );
        let global_disc = b.mlp(
            "global_disc",
            fd,
            &config.global_disc_hidden,
            1,
            ParamGroup::GlobalDisc,
        );
        let local_discs = (0..config.num_rps)
            .map(|r| {
                b.mlp(
                    &format!("local_disc{r}"),
                    fd,
                    &config.local_disc_hidden,
                    1,
                    ParamGroup::LocalDisc(r),
                )
            })
            .collect();
        let Builder {
            mut store, groups, ..
        } = b;
        let scale = T::lit(config.predictor_lr_scale);
        for (p, g) in store.iter_mut().zip(&groups) {
            if *g == ParamGroup::Predictor {
                p.lr_scale = scale;
            }
        }
        let mu = config.initial_mu();
        Ok(Self {
            config,
            input,
            store,
            groups,
            blocks,
            bn_stats,
            feature,
            predictor,
            global_disc,
            local_discs,
            mu,
            epochs_trained: 0,
        })
    }

    pub fn config(&self) -> &DaanConfig {
        &self.config
    }

    /// Replaces the training hyper-parameters; the architecture must match.
    pub(crate) fn set_config(&mut self, config: DaanConfig) -> Result<()> {
        if !config.same_architecture(&self.config) {
            return Err(Error::invalid(
                "model config",
                "architecture differs from the model's",
            ));
        }
        let scale = T::lit(config.predictor_lr_scale);
        for (p, g) in self.store.iter_mut().zip(&self.groups) {
            if *g == ParamGroup::Predictor {
                p.lr_scale = scale;
            }
        }
        self.config = config;
        Ok(())
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input
    }

    pub fn num_rps(&self) -> usize {
        self.config.num_rps
    }

    /// Current fusion factor between global and local adaptation.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn bn_stats(&self) -> &[BatchNormStats<T>] {
        &self.bn_stats
    }

    pub(crate) fn bn_stats_mut(&mut self) -> &mut [BatchNormStats<T>] {
        &mut self.bn_stats
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn param_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.groups.len())
            .filter(|&i| self.groups[i] == group)
            .map(ParamId)
            .collect()
    }

    /// Ids of the last extractor layer (the one producing the features).
    pub fn feature_layer(&self) -> [ParamId; 2] {
        [self.feature.weight, self.feature.bias]
    }

    fn affine(&self, g: &mut Graph<T>, layer: Affine, x: Var) -> Result<Var> {
        let w = g.param(&self.store, layer.weight);
        let b = g.param(&self.store, layer.bias);
        Ok(g.linear(x, w, b)?)
    }

    fn mlp(&self, g: &mut Graph<T>, layers: &[Affine], mut x: Var) -> Result<Var> {
        let alpha = T::lit(self.config.leaky_alpha);
        for (i, &layer) in layers.iter().enumerate() {
            x = self.affine(g, layer, x)?;
            if i + 1 < layers.len() {
                x = g.leaky_relu(x, alpha);
            }
        }
        Ok(x)
    }

    /// Features `[B, feature_dim]` of a `[B, M, K, N]` image batch.
    pub fn forward_features(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = g.value(x).shape();
        let expected = [
            self.input.antennas,
            self.input.frames,
            self.input.subcarriers,
        ];
        if s.len() != 4 || s[1..] != expected {
            return Err(Error::shape(
                "model input",
                format!("[B, {}, {}, {}]", expected[0], expected[1], expected[2]),
                format!("{s:?}"),
            ));
        }
        let alpha = T::lit(self.config.leaky_alpha);
        let mut h = x;
        for (block, stats) in self.blocks.iter().zip(self.bn_stats.iter_mut()) {
            for conv in block.convs {
                let w = g.param(&self.store, conv.weight);
                let b = g.param(&self.store, conv.bias);
                h = g.conv2d(h, w, b, 1, 1)?;
                h = g.leaky_relu(h, alpha);
            }
            h = g.maxpool2(h)?;
            let scale = g.param(&self.store, block.bn_scale);
            let shift = g.param(&self.store, block.bn_shift);
            h = g.batch_norm(h, scale, shift, stats, mode)?;
        }
        let flat = g.flatten(h)?;
        let f = self.affine(g, self.feature, flat)?;
        Ok(g.leaky_relu(f, alpha))
    }

    pub fn predictor_logits(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        self.mlp(g, &self.predictor, features)
    }

    /// Softmax over reference points.
    pub fn predict_labels(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let logits = self.predictor_logits(g, features)?;
        Ok(g.softmax(logits)?)
    }

    /// Probability `[B, 1]` that each row comes from the source domain.
    pub fn global_discriminator(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let logit = self.mlp(g, &self.global_disc, input)?;
        Ok(g.sigmoid(logit))
    }

    pub fn local_discriminator(&self, g: &mut Graph<T>, rp: usize, input: Var) -> Result<Var> {
        let layers = self.local_discs.get(rp).ok_or_else(|| {
            Error::invalid(
                "local discriminator",
                format!("{rp} outside [0, {})", self.num_rps()),
            )
        })?;
        let logit = self.mlp(g, layers, input)?;
        Ok(g.sigmoid(logit))
    }

    /// Eval-mode features of a set of images.
    pub fn features(&mut self, images: &[&RadioImage]) -> Result<Tensor<T>> {
        self.eval_batched(images, |_, _, f| Ok(f))
    }

    /// Eval-mode predictor probabilities `[B, R]`.
    pub fn predict_proba(&mut self, images: &[&RadioImage]) -> Result<Tensor<T>> {
        self.eval_batched(images, |m, g, f| m.predict_labels(g, f))
    }

    fn eval_batched(
        &mut self,
        images: &[&RadioImage],
        head: impl Fn(&Self, &mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        const CHUNK: usize = 128;
        let mut data = Vec::new();
        let mut width = 0;
        for chunk in images.chunks(CHUNK) {
            let mut g = Graph::new();
            let x = g.constant(images_to_tensor(chunk)?);
            let f = self.forward_features(&mut g, x, Mode::Eval)?;
            let out = head(self, &mut g, f)?;
            let v = g.value(out);
            width = v.row_len();
            data.extend_from_slice(v.data());
        }
        Ok(Tensor::new(vec![images.len(), width], data)?)
    }
}

/// Stacks `K x N x M` images into a `[B, M, K, N]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&RadioImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("image batch", "no images"))?;
    let s = first.shape;
    let (k, n, m) = (s.frames, s.subcarriers, s.antennas);
    let mut data = Vec::with_capacity(images.len() * s.len());
    for (i, img) in images.iter().enumerate() {
        if img.shape != s || img.data.len() != s.len() {
            return Err(Error::shape(
                format!("image {i} of batch"),
                format!("{s:?}"),
                format!("{:?}", img.shape),
            ));
        }
        for a in 0..m {
            for f in 0..k {
                for c in 0..n {
                    data.push(T::lit(img.data[(f * n + c) * m + a] as f64));
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), m, k, n], data)?)
}
