use rand::Rng;
use rand_distr::StandardNormal;

use super::{NetKind, ParamSet, TimeEmbedding, UNetConfig};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Option<Dense>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Layout {
    time_mlp: Option<(Dense, Dense)>,
    conv_in: Conv,
    down: Vec<ResBlock>,
    downsample: Vec<Conv>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    upsample: Vec<Conv>,
    out_norm: Norm,
    out_conv: Conv,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

struct Builder<S> {
    params: ParamSet<S>,
    inits: Vec<Init>,
}

impl<S: Scalar> Builder<S> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.inits.push(init);
        self.params.push(name, Tensor::zeros(shape))
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero: bool,
    ) -> Conv {
        let init = if zero {
            Init::Zeros
        } else {
            Init::FanIn(cin * k * k)
        };
        Conv {
            w: self.add(format!("{name}.weight"), vec![cout, cin, k, k], init),
            b: self.add(format!("{name}.bias"), vec![cout], Init::Zeros),
            stride,
            pad: (k - 1) / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), vec![c], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![c], Init::Zeros),
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        Dense {
            w: self.add(format!("{name}.weight"), vec![fout, fin], Init::FanIn(fin)),
            b: self.add(format!("{name}.bias"), vec![fout], Init::Zeros),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            time: (temb > 0).then(|| self.dense(&format!("{name}.time"), temb, cout)),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }
}

/// UNet with residual blocks, group norm and SiLU. Downsampling is a
/// stride-2 3x3 convolution, upsampling is nearest-neighbour x2 followed by
/// a 3x3 convolution to the finer level's width. There is no attention.
#[derive(Debug, Clone)]
pub struct UNet<S> {
    config: UNetConfig,
    params: ParamSet<S>,
    inits: Vec<Init>,
    layout: Layout,
}

impl<S: Scalar> UNet<S> {
    /// Builds the architecture with all parameters zeroed.
    pub fn zeroed(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamSet::default(),
            inits: Vec::new(),
        };
        let chans = config.level_channels();
        let levels = chans.len();
        let temb = config.time_embed_dim;
        let time_mlp = (temb > 0).then(|| {
            (
                b.dense("time.fc1", temb, temb),
                b.dense("time.fc2", temb, temb),
            )
        });
        let conv_in = b.conv("conv_in", config.in_channels(), chans[0], 3, 1, false);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cur = chans[0];
        for (i, &c) in chans.iter().enumerate() {
            down.push(b.res_block(&format!("down.{i}.res"), cur, c, temb));
            cur = c;
            if i + 1 < levels {
                downsample.push(b.conv(&format!("down.{i}.downsample"), c, c, 3, 2, false));
            }
        }
        let mid = b.res_block("mid.res", cur, cur, temb);
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for i in (0..levels).rev() {
            up.push(b.res_block(&format!("up.{i}.res"), cur + chans[i], chans[i], temb));
            cur = chans[i];
            if i > 0 {
                // the upsampling conv also narrows to the next level's width
                upsample.push(b.conv(&format!("up.{i}.upsample"), cur, chans[i - 1], 3, 1, false));
                cur = chans[i - 1];
            }
        }
        let out_norm = b.norm("out.norm", cur);
        let out_conv = b.conv("out.conv", cur, config.out_channels(), 3, 1, true);
        Ok(UNet {
            config,
            params: b.params,
            inits: b.inits,
            layout: Layout {
                time_mlp,
                conv_in,
                down,
                downsample,
                mid,
                up,
                upsample,
                out_norm,
                out_conv,
            },
        })
    }

    /// Fan-in scaled normal weights, zero biases, unit norm scales, and a
    /// zero final convolution.
    pub fn init<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        for (t, init) in net.params.tensors_mut().iter_mut().zip(&net.inits) {
            match *init {
                Init::Zeros => {}
                Init::Ones => t.data_mut().fill(S::one()),
                Init::FanIn(fan_in) => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in t.data_mut() {
                        *v = S::of(std * rng.sample::<f64, _>(StandardNormal));
                    }
                }
            }
        }
        Ok(net)
    }

    /// Builds the architecture for `config` and takes parameter values from
    /// `params`, which must match names and shapes exactly.
    pub fn from_params(config: UNetConfig, params: ParamSet<S>) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        net.params.assign_from(&params)?;
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, shape: &[usize], channels: usize) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != channels || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "unet input (expected [N, channels, size, size])",
                shape,
                &[shape.first().copied().unwrap_or(0), channels, s, s],
            ));
        }
        Ok(())
    }

    /// Records the network on `tape`. `vars` are the bound parameters (see
    /// [`ParamSet::bind`]). Returns the output and the bottleneck activation.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        input: Var,
        timesteps: Option<&[usize]>,
    ) -> Result<(Var, Var)> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        self.check_input(tape.shape(input), self.config.in_channels())?;
        let n = tape.shape(input)[0];
        let l = &self.layout;
        let temb = match (&l.time_mlp, timesteps) {
            (Some((fc1, fc2)), Some(ts)) => {
                if ts.len() != n {
                    return Err(Error::shape("timesteps", &[n], &[ts.len()]));
                }
                let enc = TimeEmbedding::new(self.config.time_embed_dim)?.encode(ts);
                let e = tape.constant(enc);
                let h = dense(tape, vars, fc1, e)?;
                let h = tape.silu(h)?;
                let h = dense(tape, vars, fc2, h)?;
                Some(tape.silu(h)?)
            }
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::Contract("this network needs timesteps".into()));
            }
        };
        let groups = self.config.groups;
        let mut h = conv(tape, vars, &l.conv_in, input)?;
        let mut skips = Vec::with_capacity(l.down.len());
        for (i, block) in l.down.iter().enumerate() {
            h = res_block(tape, vars, block, h, temb, groups)?;
            skips.push(h);
            if let Some(ds) = l.downsample.get(i) {
                h = conv(tape, vars, ds, h)?;
            }
        }
        h = res_block(tape, vars, &l.mid, h, temb, groups)?;
        let bottleneck = h;
        for (j, block) in l.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat_channels(h, skip)?;
            h = res_block(tape, vars, block, h, temb, groups)?;
            if let Some(us) = l.upsample.get(j) {
                h = tape.upsample_nearest_2x(h)?;
                h = conv(tape, vars, us, h)?;
            }
        }
        h = norm(tape, vars, &l.out_norm, h, groups)?;
        h = tape.silu(h)?;
        let out = conv(tape, vars, &l.out_conv, h)?;
        Ok((out, bottleneck))
    }

    /// Noise prediction `eps(x_t, t | m)` recorded on `tape`.
    pub fn predict_noise_on(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        x_t: Var,
        mask_channel: Var,
        timesteps: &[usize],
    ) -> Result<Var> {
        if self.config.kind != NetKind::Denoiser {
            return Err(Error::Contract(
                "noise prediction needs a denoiser network".into(),
            ));
        }
        self.check_input(tape.shape(x_t), self.config.image_channels)?;
        self.check_input(tape.shape(mask_channel), 1)?;
        if tape.shape(x_t)[0] != tape.shape(mask_channel)[0] {
            return Err(Error::shape(
                "mask batch",
                tape.shape(x_t),
                tape.shape(mask_channel),
            ));
        }
        let input = tape.concat_channels(x_t, mask_channel)?;
        Ok(self.forward(tape, vars, input, Some(timesteps))?.0)
    }

    /// Inference-only noise prediction (no gradients recorded).
    pub fn predict_noise(
        &self,
        x_t: &Tensor<S>,
        mask_channel: &Tensor<S>,
        timesteps: &[usize],
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let m = tape.constant(mask_channel.clone());
        let out = self.predict_noise_on(&mut tape, &vars, x, m, timesteps)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-only segmenter pass: `(logits [N, C, H, W], pooled
    /// bottleneck features [N, d])`.
    pub fn segment_with_features(&self, images: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        if self.config.kind != NetKind::Segmenter {
            return Err(Error::Contract(
                "segmentation needs a segmenter network".into(),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let (logits, bottleneck) = self.forward(&mut tape, &vars, x, None)?;
        let feats = tape.spatial_mean(bottleneck)?;
        Ok((tape.value(logits).clone(), tape.value(feats).clone()))
    }
}

fn conv<S: Scalar>(tape: &mut Tape<S>, vars: &[Var], c: &Conv, x: Var) -> Result<Var> {
    tape.conv2d(x, vars[c.w], Some(vars[c.b]), c.stride, c.pad)
}

fn norm<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &[Var],
    n: &Norm,
    x: Var,
    groups: usize,
) -> Result<Var> {
    tape.group_norm(x, vars[n.gamma], vars[n.beta], groups)
}

fn dense<S: Scalar>(tape: &mut Tape<S>, vars: &[Var], d: &Dense, x: Var) -> Result<Var> {
    tape.linear(x, vars[d.w], Some(vars[d.b]))
}

fn res_block<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &[Var],
    b: &ResBlock,
    x: Var,
    temb: Option<Var>,
    groups: usize,
) -> Result<Var> {
    let mut h = norm(tape, vars, &b.norm1, x, groups)?;
    h = tape.silu(h)?;
    h = conv(tape, vars, &b.conv1, h)?;
    if let (Some(proj), Some(e)) = (&b.time, temb) {
        let shift = dense(tape, vars, proj, e)?;
        h = tape.add_channels(h, shift)?;
    }
    h = norm(tape, vars, &b.norm2, h, groups)?;
    h = tape.silu(h)?;
    h = conv(tape, vars, &b.conv2, h)?;
    let skip = match &b.skip {
        Some(s) => conv(tape, vars, s, x)?,
        None => x,
    };
    tape.add(h, skip)
}
