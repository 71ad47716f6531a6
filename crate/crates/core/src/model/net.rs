//! The desk-scale encoder–decoder.
//!
//! ```text
//! enc1  conv3x3+relu  Cin -> C     H
//! pool1 maxpool2x2                 H/2
//! enc2  conv3x3+relu  C   -> 2C    H/2
//! pool2 maxpool2x2                 H/4
//! bott  conv3x3+relu  2C  -> 4C    H/4
//! dec1  up2x, conv3x3+relu 4C -> 2C   H/2
//! dec2  up2x, conv3x3+relu 2C -> C    H
//! head  conv1x1       C   -> K     H
//! ```
//!
//! The outputs of the seven blocks before the head are the tap sites.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::numeric::{Real, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub width: usize,
    pub classes: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("model.in_channels must be at least 1".into()));
        }
        if self.width < 2 {
            return Err(Error::Config(format!(
                "model.width must be at least 2, got {}",
                self.width
            )));
        }
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::Config(format!(
                "model.classes must lie in 2..=254, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count of the block list above.
    pub fn param_count(&self) -> usize {
        let (cin, c, k) = (self.in_channels, self.width, self.classes);
        let conv = |i: usize, o: usize, ks: usize| o * i * ks * ks + o;
        conv(cin, c, 3)
            + conv(c, 2 * c, 3)
            + conv(2 * c, 4 * c, 3)
            + conv(4 * c, 2 * c, 3)
            + conv(2 * c, c, 3)
            + conv(c, k, 1)
    }
}

/// A block boundary that can be tapped, in network order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    Enc1,
    Pool1,
    Enc2,
    Pool2,
    Bottleneck,
    Dec1,
    Dec2,
}

impl Site {
    pub const ALL: [Site; 7] = [
        Site::Enc1,
        Site::Pool1,
        Site::Enc2,
        Site::Pool2,
        Site::Bottleneck,
        Site::Dec1,
        Site::Dec2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Site> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Enc1 => "enc1",
            Site::Pool1 => "pool1",
            Site::Enc2 => "enc2",
            Site::Pool2 => "pool2",
            Site::Bottleneck => "bottleneck",
            Site::Dec1 => "dec1",
            Site::Dec2 => "dec2",
        }
    }

    pub fn channels(self, cfg: &NetConfig) -> usize {
        match self {
            Site::Enc1 | Site::Pool1 | Site::Dec2 => cfg.width,
            Site::Enc2 | Site::Pool2 | Site::Dec1 => 2 * cfg.width,
            Site::Bottleneck => 4 * cfg.width,
        }
    }

    /// Spatial reduction factor relative to the input.
    pub fn downscale(self) -> usize {
        match self {
            Site::Enc1 | Site::Dec2 => 1,
            Site::Pool1 | Site::Enc2 | Site::Dec1 => 2,
            Site::Pool2 | Site::Bottleneck => 4,
        }
    }
}

/// Output of [`SegNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub taps: TapActivations,
    /// Tape handles of θ in [`ParamStore`] order.
    pub params: Vec<Var>,
}

/// Intermediate features `z^m` captured at the requested sites.
#[derive(Clone, Debug, Default)]
pub struct TapActivations {
    pub sites: Vec<Site>,
    pub vars: Vec<Var>,
}

impl TapActivations {
    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

pub(crate) fn he_normal<R: Real>(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor<R> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        R::from_f64_lossy(z * std)
    })
    .expect("positive extents")
}

const LAYERS: [&str; 6] = ["enc1", "enc2", "bottleneck", "dec1", "dec2", "head"];

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<R: Real> {
    config: NetConfig,
    params: ParamStore<R>,
}

impl<R: Real> SegNet<R> {
    /// He-initialized network; biases start at zero.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed).derive(&[0x7e7]);
        let mut params = ParamStore::new();
        for (name, (cin, cout, k)) in LAYERS.iter().zip(Self::layer_dims(&config)) {
            params.push(
                format!("{name}.weight"),
                he_normal(&mut rng, &[cout, cin, k, k], cin * k * k),
            );
            params.push(format!("{name}.bias"), Tensor::zeros(&[cout])?);
        }
        debug_assert_eq!(params.numel(), config.param_count());
        Ok(Self { config, params })
    }

    fn layer_dims(cfg: &NetConfig) -> [(usize, usize, usize); 6] {
        let c = cfg.width;
        [
            (cfg.in_channels, c, 3),
            (c, 2 * c, 3),
            (2 * c, 4 * c, 3),
            (4 * c, 2 * c, 3),
            (2 * c, c, 3),
            (c, cfg.classes, 1),
        ]
    }

    /// Wraps existing parameters after checking them against the layout.
    pub fn from_params(config: NetConfig, params: ParamStore<R>) -> Result<Self> {
        config.validate()?;
        let reference = Self::build(config, 0)?;
        reference
            .params
            .check_compatible(&params)
            .map_err(|e| Error::Config(format!("parameters do not fit network: {e}")))?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
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

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Runs the network on `x` (`[B, Cin, H, W]`, H and W divisible by 4),
    /// capturing the block outputs listed in `sites`. With `trainable` false
    /// the parameters enter the tape as constants.
    pub fn forward(&self, tape: &mut Tape<R>, x: Var, sites: &[Site], trainable: bool) -> Result<ForwardPass> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::dim(
                "segnet",
                format!("input must be [B, {}, H, W], got {s:?}", self.config.in_channels),
            ));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::dim(
                "segnet",
                format!("input axes 2,3 ({}x{}) must be divisible by 4", s[2], s[3]),
            ));
        }
        let params: Vec<Var> = self
            .params
            .tensors()
            .map(|t| {
                let t = t.clone();
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        let mut taps = TapActivations::default();
        let mut capture = |site: Site, v: Var| {
            if sites.contains(&site) {
                taps.sites.push(site);
                taps.vars.push(v);
            }
        };
        let p = &params;

        let h = tape.conv2d(x, p[0], p[1], 1, 1)?;
        let h = tape.relu(h)?;
        capture(Site::Enc1, h);
        let h = tape.maxpool2x2(h)?;
        capture(Site::Pool1, h);
        let h = tape.conv2d(h, p[2], p[3], 1, 1)?;
        let h = tape.relu(h)?;
        capture(Site::Enc2, h);
        let h = tape.maxpool2x2(h)?;
        capture(Site::Pool2, h);
        let h = tape.conv2d(h, p[4], p[5], 1, 1)?;
        let h = tape.relu(h)?;
        capture(Site::Bottleneck, h);
        let h = tape.upsample_nearest2x(h)?;
        let h = tape.conv2d(h, p[6], p[7], 1, 1)?;
        let h = tape.relu(h)?;
        capture(Site::Dec1, h);
        let h = tape.upsample_nearest2x(h)?;
        let h = tape.conv2d(h, p[8], p[9], 1, 1)?;
        let h = tape.relu(h)?;
        capture(Site::Dec2, h);
        let logits = tape.conv2d(h, p[10], p[11], 1, 0)?;

        Ok(ForwardPass { logits, taps, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: NetConfig = NetConfig {
        in_channels: 3,
        width: 8,
        classes: 4,
    };

    #[test]
    fn hand_counted_parameters() {
        // enc1 8·3·9+8, enc2 16·8·9+16, bott 32·16·9+32,
        // dec1 16·32·9+16, dec2 8·16·9+8, head 4·8+4
        let hand = 224 + 1168 + 4640 + 4624 + 1160 + 36;
        assert_eq!(hand, 11852);
        assert_eq!(CFG.param_count(), hand);
        assert_eq!(SegNet::<f32>::build(CFG, 7).unwrap().param_count(), hand);
    }

    #[test]
    fn build_is_deterministic() {
        let a = SegNet::<f32>::build(CFG, 7).unwrap();
        let b = SegNet::<f32>::build(CFG, 7).unwrap();
        assert!(a.params().bit_eq(b.params()));
        let c = SegNet::<f32>::build(CFG, 8).unwrap();
        assert!(!a.params().bit_eq(c.params()));
    }

    #[test]
    fn width_one_is_rejected() {
        let cfg = NetConfig { width: 1, ..CFG };
        assert!(matches!(SegNet::<f32>::build(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn logits_have_input_resolution() {
        let net = SegNet::<f32>::build(CFG, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 16, 12], 0.5).unwrap());
        let fp = net.forward(&mut tape, x, &[], true).unwrap();
        assert_eq!(tape.shape(fp.logits), &[2, 4, 16, 12]);
        assert!(fp.taps.is_empty());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = SegNet::<f32>::build(CFG, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 6, 8]).unwrap());
        assert!(matches!(
            net.forward(&mut tape, x, &[], false),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn tap_extents_follow_pooling() {
        let net = SegNet::<f32>::build(CFG, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 16, 16], 0.1).unwrap());
        let fp = net.forward(&mut tape, x, &[Site::Pool1, Site::Pool2], true).unwrap();
        assert_eq!(tape.shape(fp.taps.vars[0]), &[1, 8, 8, 8]);
        assert_eq!(tape.shape(fp.taps.vars[1]), &[1, 16, 4, 4]);
        for site in Site::ALL {
            let fp = net.forward(&mut tape, x, &[site], false).unwrap();
            let s = tape.shape(fp.taps.vars[0]);
            assert_eq!(s[1], site.channels(&CFG));
            assert_eq!(s[2], 16 / site.downscale());
        }
    }
}
