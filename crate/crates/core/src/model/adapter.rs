//! Resolution adapters: map tap features to full-resolution class probabilities.

use serde::{Deserialize, Serialize};

use super::net::he_normal;
use super::{NetConfig, ParamStore, Site};
use crate::error::{Error, Result};
use crate::numeric::{Real, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    /// 1×1 conv to K channels.
    #[default]
    Linear,
    /// 1×1 conv (C_m→C_m) + ReLU, then 1×1 conv to K channels.
    Hidden,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterLayout {
    pub site: Site,
    pub in_channels: usize,
    pub classes: usize,
    /// Number of 2× upsamplings back to input resolution.
    pub upsample_steps: u32,
    pub kind: AdapterKind,
}

impl AdapterLayout {
    fn tensors(&self) -> usize {
        match self.kind {
            AdapterKind::Linear => 2,
            AdapterKind::Hidden => 4,
        }
    }
}

/// All adapters Φ = {φ_m} of one tap configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<R: Real> {
    layouts: Vec<AdapterLayout>,
    params: ParamStore<R>,
}

fn layouts_for(net: &NetConfig, sites: &[Site], kind: AdapterKind) -> Vec<AdapterLayout> {
    sites
        .iter()
        .map(|&site| AdapterLayout {
            site,
            in_channels: site.channels(net),
            classes: net.classes,
            upsample_steps: site.downscale().trailing_zeros(),
            kind,
        })
        .collect()
}

impl<R: Real> AdapterSet<R> {
    pub fn build(net: &NetConfig, sites: &[Site], kind: AdapterKind, seed: u64) -> Result<Self> {
        net.validate()?;
        let layouts = layouts_for(net, sites, kind);
        let mut params = ParamStore::new();
        for (m, l) in layouts.iter().enumerate() {
            let mut rng = RngStream::new(seed).derive(&[0xada, m as u64]);
            if l.kind == AdapterKind::Hidden {
                params.push(
                    format!("adapter{m}.hidden.weight"),
                    he_normal(&mut rng, &[l.in_channels, l.in_channels, 1, 1], l.in_channels),
                );
                params.push(format!("adapter{m}.hidden.bias"), Tensor::zeros(&[l.in_channels])?);
            }
            params.push(
                format!("adapter{m}.weight"),
                he_normal(&mut rng, &[l.classes, l.in_channels, 1, 1], l.in_channels),
            );
            params.push(format!("adapter{m}.bias"), Tensor::zeros(&[l.classes])?);
        }
        Ok(Self { layouts, params })
    }

    pub fn from_params(net: &NetConfig, sites: &[Site], kind: AdapterKind, params: ParamStore<R>) -> Result<Self> {
        let reference = Self::build(net, sites, kind, 0)?;
        reference
            .params
            .check_compatible(&params)
            .map_err(|e| Error::Config(format!("parameters do not fit adapters: {e}")))?;
        Ok(Self {
            layouts: reference.layouts,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    pub fn layouts(&self) -> &[AdapterLayout] {
        &self.layouts
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<R> {
        self.params
    }

    /// Places Φ on the tape; returns one handle group per adapter.
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> Vec<Vec<Var>> {
        let mut it = self.params.tensors();
        self.layouts
            .iter()
            .map(|l| {
                (0..l.tensors())
                    .map(|_| {
                        let t = it.next().expect("layout matches store").clone();
                        if trainable {
                            tape.param(t)
                        } else {
                            tape.constant(t)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// 1×1 conv, repeated nearest 2× upsampling to input resolution, channel softmax.
    pub fn forward(&self, tape: &mut Tape<R>, bound: &[Vec<Var>], m: usize, z: Var) -> Result<Var> {
        let l = self
            .layouts
            .get(m)
            .ok_or_else(|| Error::Contract(format!("adapter {m} requested but only {} exist", self.len())))?;
        let zs = tape.shape(z);
        if zs.len() != 4 || zs[1] != l.in_channels {
            return Err(Error::dim(
                "adapter",
                format!(
                    "adapter {m} expects {} channels on axis 1, got shape {zs:?}",
                    l.in_channels
                ),
            ));
        }
        let p = &bound[m];
        let mut h = z;
        if l.kind == AdapterKind::Hidden {
            h = tape.conv2d(h, p[0], p[1], 1, 0)?;
            h = tape.relu(h)?;
        }
        let (w, b) = (p[p.len() - 2], p[p.len() - 1]);
        h = tape.conv2d(h, w, b, 1, 0)?;
        for _ in 0..l.upsample_steps {
            h = tape.upsample_nearest2x(h)?;
        }
        tape.softmax_channels(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NET: NetConfig = NetConfig {
        in_channels: 3,
        width: 4,
        classes: 3,
    };

    #[test]
    fn zero_weights_give_uniform_output() {
        let mut set = AdapterSet::<f64>::build(&NET, &[Site::Pool1], AdapterKind::Linear, 1).unwrap();
        set.params_mut()
            .tensors_mut()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_fn(&[2, 4, 4, 4], |i| i as f64 * 0.1).unwrap());
        let bound = set.bind(&mut tape, true);
        let q = set.forward(&mut tape, &bound, 0, z).unwrap();
        assert_eq!(tape.shape(q), &[2, 3, 8, 8]);
        assert!(tape.value(q).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn half_resolution_output_is_blockwise_constant() {
        let set = AdapterSet::<f64>::build(&NET, &[Site::Pool1], AdapterKind::Linear, 2).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_fn(&[1, 4, 2, 2], |i| (i as f64).sin()).unwrap());
        let bound = set.bind(&mut tape, false);
        let q = set.forward(&mut tape, &bound, 0, z).unwrap();
        let d = tape.value(q).data();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let anchor = d[c * 16 + (y / 2 * 2) * 4 + x / 2 * 2];
                    assert_eq!(d[c * 16 + y * 4 + x], anchor);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let set = AdapterSet::<f32>::build(&NET, &[Site::Pool2], AdapterKind::Linear, 2).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4, 2, 2]).unwrap());
        let bound = set.bind(&mut tape, false);
        assert!(matches!(
            set.forward(&mut tape, &bound, 0, z),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn hidden_kind_has_extra_layer() {
        let lin = AdapterSet::<f32>::build(&NET, &[Site::Enc2], AdapterKind::Linear, 2).unwrap();
        let hid = AdapterSet::<f32>::build(&NET, &[Site::Enc2], AdapterKind::Hidden, 2).unwrap();
        assert_eq!(lin.params().numel(), 3 * 8 + 3);
        assert_eq!(hid.params().numel(), 8 * 8 + 8 + 3 * 8 + 3);
    }
}
