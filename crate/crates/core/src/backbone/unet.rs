//! Two-level U-Net. The encoder (through the bottleneck upsample) is frozen
//! after pretraining, so its outputs can be cached per sample.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::CLASSES;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipMode {
    Identity,
    IacCell,
}

/// Skip level: `Coarse` is evaluated first (8x8), then `Fine` (16x16).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetChannels {
    pub fine: usize,
    pub coarse: usize,
    pub classes: usize,
}

impl Default for UNetChannels {
    fn default() -> Self {
        UNetChannels {
            fine: 8,
            coarse: 16,
            classes: CLASSES,
        }
    }
}

impl UNetChannels {
    /// (skip channels, upsampled channels) entering the skip at `level`.
    pub fn skip_inputs(&self, level: Level) -> (usize, usize) {
        match level {
            Level::Coarse => (self.coarse, self.coarse),
            Level::Fine => (self.fine, self.coarse),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNetBackbone {
    pub store: ParamStore,
    pub channels: UNetChannels,
    pub frozen: bool,
    pub skip_mode: SkipMode,
    enc1a: ConvLayer,
    enc1b: ConvLayer,
    enc2a: ConvLayer,
    enc2b: ConvLayer,
    bottleneck: ConvLayer,
    dec2: ConvLayer,
    dec1: ConvLayer,
    head: ConvLayer,
}

/// Encoder outputs on a graph.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub skip_fine: Var,
    pub skip_coarse: Var,
    pub up_coarse: Var,
}

/// Cached encoder outputs for one sample (batch dimension 1).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub skip_fine: Tensor,
    pub skip_coarse: Tensor,
    pub up_coarse: Tensor,
}

impl EncodedSample {
    pub fn stack(samples: &[&EncodedSample]) -> Result<EncodedSample> {
        let pick = |f: fn(&EncodedSample) -> &Tensor| {
            Tensor::stack_batch(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
        };
        Ok(EncodedSample {
            skip_fine: pick(|s| &s.skip_fine)?,
            skip_coarse: pick(|s| &s.skip_coarse)?,
            up_coarse: pick(|s| &s.up_coarse)?,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> EncoderVars {
        EncoderVars {
            skip_fine: g.constant(&self.skip_fine),
            skip_coarse: g.constant(&self.skip_coarse),
            up_coarse: g.constant(&self.up_coarse),
        }
    }
}

fn conv_layer(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> ConvLayer {
    let fan_in = cin * k * k;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let weight = store.add(
        format!("unet.{name}.weight"),
        Tensor::from_fn(vec![cout, cin, k, k], |_| normal.sample(rng)),
    );
    let bias = store.add(format!("unet.{name}.bias"), Tensor::zeros(vec![cout]));
    ConvLayer { weight, bias }
}

impl UNetBackbone {
    pub fn new(channels: UNetChannels, rng: &mut impl Rng) -> Self {
        let (f, c, k) = (channels.fine, channels.coarse, channels.classes);
        let mut store = ParamStore::new();
        let s = &mut store;
        let enc1a = conv_layer(s, rng, "enc1a", 1, f, 3);
        let enc1b = conv_layer(s, rng, "enc1b", f, f, 3);
        let enc2a = conv_layer(s, rng, "enc2a", f, c, 3);
        let enc2b = conv_layer(s, rng, "enc2b", c, c, 3);
        let bottleneck = conv_layer(s, rng, "bottleneck", c, c, 3);
        let dec2 = conv_layer(s, rng, "dec2", 2 * c, c, 3);
        let dec1 = conv_layer(s, rng, "dec1", f + c, f, 3);
        let head = conv_layer(s, rng, "head", f, k, 1);
        UNetBackbone {
            store,
            channels,
            frozen: false,
            skip_mode: SkipMode::Identity,
            enc1a,
            enc1b,
            enc2a,
            enc2b,
            bottleneck,
            dec2,
            dec1,
            head,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    fn conv(&self, g: &mut Graph, x: Var, layer: ConvLayer, relu: bool, train: bool) -> Result<Var> {
        let train = train && !self.frozen;
        let w = g.bind(&self.store, layer.weight, train);
        let b = g.bind(&self.store, layer.bias, train);
        let y = g.conv2d(x, w, Some(b), 1, 1)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    /// Encoder path: images (b, 1, h, w) with h, w divisible by 4.
    pub fn encode_graph(&self, g: &mut Graph, images: Var, train: bool) -> Result<EncoderVars> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(Error::shape(
                "unet",
                format!("expected (b, 1, h, w) with h, w divisible by 4, got {shape:?}"),
            ));
        }
        let x = self.conv(g, images, self.enc1a, true, train)?;
        let skip_fine = self.conv(g, x, self.enc1b, true, train)?;
        let x = g.max_pool2(skip_fine)?;
        let x = self.conv(g, x, self.enc2a, true, train)?;
        let skip_coarse = self.conv(g, x, self.enc2b, true, train)?;
        let x = g.max_pool2(skip_coarse)?;
        let x = self.conv(g, x, self.bottleneck, true, train)?;
        let up_coarse = g.upsample2(x)?;
        Ok(EncoderVars {
            skip_fine,
            skip_coarse,
            up_coarse,
        })
    }

    /// Decoder path. `skip` maps (level, skip features, upsampled features)
    /// to the tensor concatenated with the upsampled features.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        enc: EncoderVars,
        train: bool,
        skip: &mut dyn FnMut(&mut Graph, Level, Var, Var) -> Result<Var>,
    ) -> Result<Var> {
        let s2 = skip(g, Level::Coarse, enc.skip_coarse, enc.up_coarse)?;
        let x = g.concat(&[s2, enc.up_coarse])?;
        let x = self.conv(g, x, self.dec2, true, train)?;
        let up_fine = g.upsample2(x)?;
        let s1 = skip(g, Level::Fine, enc.skip_fine, up_fine)?;
        let x = g.concat(&[s1, up_fine])?;
        let x = self.conv(g, x, self.dec1, true, train)?;
        self.conv(g, x, self.head, false, train)
    }

    /// Plain U-Net forward with identity skips.
    pub fn forward(&self, g: &mut Graph, images: Var, train: bool) -> Result<Var> {
        let enc = self.encode_graph(g, images, train)?;
        self.decode_graph(g, enc, train, &mut |_, _, s, _| Ok(s))
    }

    /// Per-sample encoder cache for a batch of images.
    pub fn encode(&self, images: &Tensor) -> Result<Vec<EncodedSample>> {
        let mut g = Graph::new();
        let x = g.constant(images);
        let enc = self.encode_graph(&mut g, x, false)?;
        let a = g.tensor(enc.skip_fine).unstack_batch()?;
        let b = g.tensor(enc.skip_coarse).unstack_batch()?;
        let c = g.tensor(enc.up_coarse).unstack_batch()?;
        Ok(a.into_iter()
            .zip(b)
            .zip(c)
            .map(|((skip_fine, skip_coarse), up_coarse)| EncodedSample {
                skip_fine,
                skip_coarse,
                up_coarse,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn shapes_through_the_network() {
        let net = UNetBackbone::new(UNetChannels::default(), &mut stream_rng(0, Stream::Backbone, 0));
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_fn(vec![2, 1, 16, 16], |i| (i as f64 * 0.1).sin()));
        let y = net.forward(&mut g, x, false).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 16, 16]);
        let enc = net
            .encode(&Tensor::from_fn(vec![2, 1, 16, 16], |i| (i as f64 * 0.1).sin()))
            .unwrap();
        assert_eq!(enc.len(), 2);
        assert_eq!(enc[0].skip_coarse.shape(), &[1, 16, 8, 8]);
        assert_eq!(enc[0].up_coarse.shape(), &[1, 16, 8, 8]);
        assert_eq!(enc[0].skip_fine.shape(), &[1, 8, 16, 16]);
    }

    #[test]
    fn cached_decode_matches_full_forward() {
        let net = UNetBackbone::new(UNetChannels::default(), &mut stream_rng(1, Stream::Backbone, 0));
        let images = Tensor::from_fn(vec![3, 1, 16, 16], |i| ((i * 7 % 13) as f64) / 13.0);
        let mut g = Graph::new();
        let x = g.constant(&images);
        let full = net.forward(&mut g, x, false).unwrap();
        let full = g.value(full).to_vec();

        let cache = net.encode(&images).unwrap();
        let stacked = EncodedSample::stack(&cache.iter().collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let enc = stacked.bind(&mut g);
        let y = net.decode_graph(&mut g, enc, false, &mut |_, _, s, _| Ok(s)).unwrap();
        assert_eq!(g.value(y), &full[..]);
    }

    #[test]
    fn frozen_network_records_no_parameters() {
        let mut net = UNetBackbone::new(UNetChannels::default(), &mut stream_rng(2, Stream::Backbone, 0));
        net.freeze();
        let before = net.fingerprint();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(vec![1, 1, 16, 16], 0.5));
        let y = net.forward(&mut g, x, true).unwrap();
        let s = g.sum(y);
        g.backward(s, &mut net.store).unwrap();
        assert!(net.store.iter().all(|(_, p)| p.tensor.grad().is_none()));
        assert_eq!(net.fingerprint(), before);
    }
}
