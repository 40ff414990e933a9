use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::layers::{Anl, BatchNorm, Conv2d, ConvTranspose3d, Layer, Mode, PRelu, Reshape, ResidualBlock, Scale};
use super::{Scalar, Tensor};

/// Architecture hyperparameters. `input_size` is `[H, W]`; `output_size` is
/// `[H_out, D_out, W_out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_c: usize,
    pub n_dc: usize,
    pub c0: usize,
    pub input_size: [usize; 2],
    pub output_size: [usize; 3],
    pub noise_std: f64,
    /// 2 for the in-plane target, 3 for the full displacement.
    pub out_channels: usize,
    /// Fixed multiplier on the final layer, in mm.
    pub output_scale: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_c: 4,
            n_dc: 4,
            c0: 8,
            input_size: [64, 64],
            output_size: [16, 8, 16],
            noise_std: 0.3,
            out_channels: 2,
            output_scale: 10.0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Best configuration reported for 256×256 projections.
    pub fn paper() -> Self {
        NetworkConfig {
            n_c: 6,
            n_dc: 6,
            c0: 64,
            input_size: [256, 256],
            output_size: [64, 32, 64],
            ..Default::default()
        }
    }

    pub fn c_f(&self) -> usize {
        1 << (self.n_c / 2)
    }

    pub fn d_f(&self) -> usize {
        1 << (self.n_dc / 2)
    }

    /// `H·W·D_f³ / (H_out·D_out·W_out·C_f²)`, if it is a positive integer.
    pub fn t_f(&self) -> Option<usize> {
        let [h, w] = self.input_size;
        let [ho, d, wo] = self.output_size;
        let num = (h as u128) * (w as u128) * (self.d_f() as u128).pow(3);
        let den = (ho as u128) * (d as u128) * (wo as u128) * (self.c_f() as u128).pow(2);
        (den > 0 && num.is_multiple_of(den) && num >= den).then(|| (num / den) as usize)
    }

    /// Per-sample encoder output shape `(C_0·C_f, H/C_f, W/C_f)`.
    pub fn encoder_output_shape(&self) -> [usize; 3] {
        let cf = self.c_f();
        [self.c0 * cf, self.input_size[0] / cf, self.input_size[1] / cf]
    }

    /// Per-sample decoder input shape `(C_0·C_f·T_f, H_out/D_f, D_out/D_f, W_out/D_f)`.
    pub fn decoder_input_shape(&self) -> Option<[usize; 4]> {
        let df = self.d_f();
        let [ho, d, wo] = self.output_size;
        Some([self.c0 * self.c_f() * self.t_f()?, ho / df, d / df, wo / df])
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let [ho, d, wo] = self.output_size;
        [self.out_channels, ho, d, wo]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("network config: {m}")));
        if self.n_c < 2 || !self.n_c.is_multiple_of(2) {
            return bad(format!("n_c must be even and at least 2, got {}", self.n_c));
        }
        if self.n_dc < 2 || !self.n_dc.is_multiple_of(2) {
            return bad(format!("n_dc must be even and at least 2, got {}", self.n_dc));
        }
        if self.c0 == 0 {
            return bad("c0 must be positive".into());
        }
        let div = 1usize << (self.n_c / 2 + 1);
        if self.input_size.iter().any(|&s| s == 0 || s % div != 0) {
            return bad(format!("input size {:?} must be divisible by {div}", self.input_size));
        }
        let df = self.d_f();
        if self.output_size.iter().any(|&s| s == 0 || s % df != 0) {
            return bad(format!(
                "output size {:?} must be divisible by D_f = {df}",
                self.output_size
            ));
        }
        if !(self.c0 * self.c_f()).is_multiple_of(df) {
            return bad(format!(
                "C_0·C_f = {} must be divisible by D_f = {df}",
                self.c0 * self.c_f()
            ));
        }
        if self.t_f().is_none() {
            return bad(format!(
                "T_f = {}·{}·{}³ / ({}·{}·{}·{}²) is not a positive integer",
                self.input_size[0],
                self.input_size[1],
                df,
                self.output_size[0],
                self.output_size[1],
                self.output_size[2],
                self.c_f()
            ));
        }
        if !(self.out_channels == 2 || self.out_channels == 3) {
            return bad(format!("out_channels must be 2 or 3, got {}", self.out_channels));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            ));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad(format!("output_scale must be positive, got {}", self.output_scale));
        }
        Ok(())
    }
}

/// Encoder, transform reshape and decoder as a flat list of layers.
pub struct Network<T: Scalar> {
    config: NetworkConfig,
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let noise_seed = |i: u64| config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
        let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
        let c0 = config.c0;
        layers.push(Box::new(Conv2d::new("enc.conv0", 1, c0, 4, 2, 1, &mut rng)));
        layers.push(Box::new(BatchNorm::new("enc.bn0", c0)));
        layers.push(Box::new(PRelu::new("enc.act0", c0)));
        let mut c = c0;
        for b in 0..(config.n_c - 2) / 2 {
            layers.push(Box::new(ResidualBlock::new(
                format!("enc.block{b}"),
                c,
                2 * c,
                2,
                &mut rng,
            )));
            c *= 2;
        }
        layers.push(Box::new(Conv2d::new("enc.conv_last", c, 2 * c, 3, 1, 1, &mut rng)));
        c *= 2;
        layers.push(Box::new(BatchNorm::new("enc.bn_last", c)));
        layers.push(Box::new(PRelu::new("enc.act_last", c)));
        layers.push(Box::new(Anl::new("enc.anl", config.noise_std, noise_seed(1))));

        let enc = config.encoder_output_shape();
        let dec = config.decoder_input_shape().expect("validated");
        layers.push(Box::new(Reshape::new("transform", enc.to_vec(), dec.to_vec())?));
        layers.push(Box::new(Anl::new("transform.anl", config.noise_std, noise_seed(2))));

        let mut cin = dec[0];
        let mut nominal = c;
        for s in 0..config.n_dc / 2 {
            let cout = nominal / 2;
            layers.push(Box::new(ConvTranspose3d::new(
                format!("dec{s}.up"),
                cin,
                cout,
                4,
                2,
                1,
                &mut rng,
            )));
            layers.push(Box::new(BatchNorm::new(format!("dec{s}.bn_up"), cout)));
            layers.push(Box::new(PRelu::new(format!("dec{s}.act_up"), cout)));
            layers.push(Box::new(ConvTranspose3d::new(
                format!("dec{s}.conv"),
                cout,
                cout,
                3,
                1,
                1,
                &mut rng,
            )));
            layers.push(Box::new(BatchNorm::new(format!("dec{s}.bn"), cout)));
            layers.push(Box::new(PRelu::new(format!("dec{s}.act"), cout)));
            cin = cout;
            nominal = cout;
        }
        layers.push(Box::new(ConvTranspose3d::zeros(
            "head",
            cin,
            config.out_channels,
            1,
            1,
            0,
        )));
        layers.push(Box::new(Scale::new("head.scale", config.output_scale)));
        Ok(Network { config, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> impl Iterator<Item = &dyn Layer<T>> {
        self.layers.iter().map(|l| l.as_ref())
    }

    /// `(N, 1, H, W)` → `(N, C_out, H_out, D_out, W_out)`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [h, w] = self.config.input_size;
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(Error::ShapeMismatch {
                layer: "input".into(),
                detail: format!("expected (N, 1, {h}, {w}), got {s:?}"),
            });
        }
        let mut y = self.layers[0].forward(x, mode)?;
        for l in &mut self.layers[1..] {
            y = l.forward(&y, mode)?;
            if !y.all_finite() {
                return Err(Error::NonFinite(format!("activation of layer {}", l.name())));
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients for the last forward pass.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
            if !g.all_finite() || !l.params().iter().all(|p| p.all_finite()) {
                return Err(Error::NonFinite(format!("gradient in layer {}", l.name())));
            }
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameters followed by buffers, flattened in layer order.
    pub fn state(&self) -> Vec<T> {
        self.params()
            .into_iter()
            .chain(self.buffers())
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn state_len(&self) -> usize {
        self.params().iter().chain(self.buffers().iter()).map(|t| t.len()).sum()
    }

    pub fn load_state(&mut self, values: &[T]) -> Result<()> {
        let expected = self.state_len();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                layer: "network".into(),
                detail: format!("state has {} values, network needs {expected}", values.len()),
            });
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        for t in self.buffers_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
