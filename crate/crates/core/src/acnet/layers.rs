use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{clamp_groups, ArchVariant, ModelConfig};
use super::params::{Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::ndgrad::{Scalar, Tape, Var, GN_EPS};

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = init.fan_in(format!("{name}.w"), &[dout, din], din);
        let b = bias.then(|| init.fan_in(format!("{name}.b"), &[dout], din));
        Self { w, b }
    }

    pub fn zeros<R: Rng>(init: &mut Init<R>, name: &str, din: usize, dout: usize) -> Self {
        let w = init.constant(format!("{name}.w"), &[dout, din], 0.0);
        let b = Some(init.constant(format!("{name}.b"), &[dout], 0.0));
        Self { w, b }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.affine(x, p[self.w.0], self.b.map(|b| p[b.0]))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, width: usize, groups: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), &[width], 1.0),
            beta: init.constant(format!("{name}.beta"), &[width], 0.0),
            groups: clamp_groups(width, groups),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.group_norm(x, self.groups, p[self.gamma.0], p[self.beta.0], GN_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, cin: usize, cout: usize, width: usize, stride: usize) -> Self {
        let fan = cin * width;
        Self {
            k: init.fan_in(format!("{name}.k"), &[width, cout, cin], fan),
            b: init.fan_in(format!("{name}.b"), &[cout], fan),
            stride,
        }
    }

    pub fn zeros<R: Rng>(init: &mut Init<R>, name: &str, cin: usize, cout: usize, width: usize) -> Self {
        Self {
            k: init.constant(format!("{name}.k"), &[width, cout, cin], 0.0),
            b: init.constant(format!("{name}.b"), &[cout], 0.0),
            stride: 1,
        }
    }

    /// Applies along axis 1 of `[S, L, c]`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.conv1d(x, p[self.k.0], p[self.b.0], self.stride)
    }
}

/// Shape knobs shared by the blocks of one network.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockStyle {
    pub heads: usize,
    pub groups: usize,
    pub width: usize,
    /// Skip group norm and clamp every stage to `[0, 1]`.
    pub mask: bool,
    pub attention: bool,
    pub mlp: bool,
}

/// Optional group norm followed by Mish, or clamping for the mask net.
#[derive(Clone, Debug)]
pub(crate) struct Act {
    norm: Option<Norm>,
    clamp: bool,
}

impl Act {
    fn new<R: Rng>(init: &mut Init<R>, name: &str, width: usize, style: &BlockStyle) -> Self {
        Self {
            norm: (!style.mask).then(|| Norm::new(init, name, width, style.groups)),
            clamp: style.mask,
        }
    }

    fn norm_only<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = match &self.norm {
            Some(n) => n.apply(tape, p, x)?,
            None => x,
        };
        Ok(if self.clamp { tape.clamp01(y) } else { y })
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = match &self.norm {
            Some(n) => n.apply(tape, p, x)?,
            None => x,
        };
        let y = tape.mish(y);
        Ok(if self.clamp { tape.clamp01(y) } else { y })
    }
}

#[derive(Clone, Debug)]
struct AttnParams {
    q: Linear,
    k: Linear,
    v: Linear,
    norm: Act,
    skip: Linear,
    skip_act: Act,
}

/// One attention-convolution block: per-object feature MLP, attention across
/// objects with a concat-skip, then a temporal conv per object.
#[derive(Clone, Debug)]
pub struct AcBlock {
    mlp: Option<(Linear, Act)>,
    proj: Option<Linear>,
    attn: Option<AttnParams>,
    heads: usize,
    conv: Conv,
    conv_act: Act,
}

impl AcBlock {
    /// A lone block with fresh parameters, styled by `cfg`.
    pub fn standalone(cfg: &ModelConfig, din: usize, dout: usize, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let style = standalone_style(cfg, dout)?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = Self::new(&mut Init { store: &mut store, rng: &mut rng }, "block", din, dout, &style, false);
        Ok((block, store))
    }

    pub(crate) fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        din: usize,
        dout: usize,
        style: &BlockStyle,
        zero_conv: bool,
    ) -> Self {
        let (mlp, proj) = if style.mlp {
            let lin = Linear::new(init, &format!("{name}.mlp"), din, dout, true);
            (Some((lin, Act::new(init, &format!("{name}.mlp_norm"), dout, style))), None)
        } else if din != dout {
            (None, Some(Linear::new(init, &format!("{name}.proj"), din, dout, true)))
        } else {
            (None, None)
        };
        let attn = style.attention.then(|| AttnParams {
            q: Linear::new(init, &format!("{name}.wq"), dout, dout, false),
            k: Linear::new(init, &format!("{name}.wk"), dout, dout, false),
            v: Linear::new(init, &format!("{name}.wv"), dout, dout, false),
            norm: Act::new(init, &format!("{name}.attn_norm"), dout, style),
            skip: Linear::new(init, &format!("{name}.skip"), 2 * dout, dout, true),
            skip_act: Act::new(init, &format!("{name}.skip_norm"), dout, style),
        });
        let w = style.width;
        let conv = if zero_conv {
            Conv::zeros(init, &format!("{name}.conv"), dout, dout, w)
        } else {
            Conv::new(init, &format!("{name}.conv"), dout, dout, w, 1)
        };
        let conv_act = Act::new(init, &format!("{name}.conv_norm"), dout, style);
        Self {
            mlp,
            proj,
            attn,
            heads: style.heads,
            conv,
            conv_act,
        }
    }

    /// Maps `[O, L, din]` to `[O, L, dout]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], z0: Var) -> Result<Var> {
        let z1 = match (&self.mlp, &self.proj) {
            (Some((lin, act)), _) => {
                let h = lin.apply(tape, p, z0)?;
                act.apply(tape, p, h)?
            }
            (None, Some(lin)) => lin.apply(tape, p, z0)?,
            (None, None) => z0,
        };
        let z3 = match &self.attn {
            Some(a) => {
                let q = a.q.apply(tape, p, z1)?;
                let k = a.k.apply(tape, p, z1)?;
                let v = a.v.apply(tape, p, z1)?;
                let h = tape.attention(q, k, v, self.heads)?;
                let z2 = a.norm.norm_only(tape, p, h)?;
                let cat = tape.concat_lastdim(z2, z1)?;
                let s = a.skip.apply(tape, p, cat)?;
                a.skip_act.apply(tape, p, s)?
            }
            None => z1,
        };
        let c = self.conv.apply(tape, p, z3)?;
        self.conv_act.apply(tape, p, c)
    }
}

/// Two AC blocks with a step-embedding bias between them and a residual
/// projection around both.
#[derive(Clone, Debug)]
pub struct ResBlock {
    a: AcBlock,
    b: AcBlock,
    time: Option<Linear>,
    residual: Option<Linear>,
    clamp: bool,
}

impl ResBlock {
    /// A lone residual block taking a `cfg.time_dim` step embedding.
    pub fn standalone(cfg: &ModelConfig, din: usize, dout: usize, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let style = standalone_style(cfg, dout)?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let block = Self::new(&mut init, "block", din, dout, &style, Some(cfg.time_dim));
        Ok((block, store))
    }

    pub(crate) fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        din: usize,
        dout: usize,
        style: &BlockStyle,
        time_dim: Option<usize>,
    ) -> Self {
        let a = AcBlock::new(init, &format!("{name}.a"), din, dout, style, false);
        let time = time_dim.map(|t| Linear::new(init, &format!("{name}.time"), t, dout, true));
        let b = AcBlock::new(init, &format!("{name}.b"), dout, dout, style, true);
        let residual = (din != dout).then(|| Linear::new(init, &format!("{name}.res"), din, dout, true));
        Self {
            a,
            b,
            time,
            residual,
            clamp: style.mask,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var, temb: Option<Var>) -> Result<Var> {
        let mut h = self.a.forward(tape, p, x)?;
        if let (Some(lin), Some(t)) = (&self.time, temb) {
            let bias = lin.apply(tape, p, t)?;
            h = tape.add_lastdim(h, bias)?;
        }
        let h = self.b.forward(tape, p, h)?;
        let r = match &self.residual {
            Some(lin) => lin.apply(tape, p, x)?,
            None => x,
        };
        let y = tape.add(h, r)?;
        Ok(if self.clamp { tape.clamp01(y) } else { y })
    }
}

fn standalone_style(cfg: &ModelConfig, dout: usize) -> Result<BlockStyle> {
    cfg.validate()?;
    if dout % cfg.heads != 0 {
        return Err(Error::Config(format!("width {dout} not divisible by {} heads", cfg.heads)));
    }
    Ok(BlockStyle {
        heads: cfg.heads,
        groups: cfg.groups,
        width: cfg.kernel_width(),
        mask: false,
        attention: cfg.arch != ArchVariant::CnnOnly,
        mlp: cfg.arch != ArchVariant::NoMlp,
    })
}

/// Sinusoidal embedding of the diffusion step followed by a small MLP.
#[derive(Clone, Debug)]
pub(crate) struct TimeEmbed {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbed {
    pub fn new<R: Rng>(init: &mut Init<R>, dim: usize) -> Self {
        Self {
            dim,
            l1: Linear::new(init, "time.l1", dim, 2 * dim, true),
            l2: Linear::new(init, "time.l2", 2 * dim, dim, true),
        }
    }

    /// Embedding passed through Mish, ready for the per-block projections.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], t: usize) -> Result<Var> {
        let e = tape.constant(sinusoidal(t, self.dim));
        let h = self.l1.apply(tape, p, e)?;
        let h = tape.mish(h);
        let h = self.l2.apply(tape, p, h)?;
        Ok(tape.mish(h))
    }
}

pub(crate) fn sinusoidal<T: Scalar>(t: usize, dim: usize) -> crate::Tensor<T> {
    let half = dim / 2;
    let mut v = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        let a = t as f64 * freq;
        v[i] = T::from_f64(a.sin());
        v[half + i] = T::from_f64(a.cos());
    }
    crate::Tensor::new(vec![dim], v).expect("embedding length")
}
