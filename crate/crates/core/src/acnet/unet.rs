use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ArchVariant, ModelConfig};
use super::layers::{BlockStyle, Conv, Linear, ResBlock, TimeEmbed};
use super::params::{Init, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{Scalar, Tape, Var};

/// Soft-conditioning outputs for one conditioned residual block.
#[derive(Clone, Copy, Debug)]
pub struct CondOutput {
    pub c_m: Var,
    pub c_b: Var,
    pub m: Var,
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    down: Option<Conv>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    up: Conv,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct SideLevel {
    blocks: Vec<ResBlock>,
    heads: Vec<Linear>,
    down: Option<Conv>,
}

/// Truncated U-Net encoder used for the factor/bias and mask nets.
#[derive(Clone, Debug)]
struct SideNet {
    levels: Vec<SideLevel>,
    mask: bool,
}

impl SideNet {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::new();
        for lvl in &self.levels {
            for (block, head) in lvl.blocks.iter().zip(&lvl.heads) {
                h = block.forward(tape, p, h, None)?;
                let y = head.apply(tape, p, h)?;
                out.push(if self.mask { tape.clamp01(y) } else { y });
            }
            if let Some(d) = &lvl.down {
                h = d.apply(tape, p, h)?;
                if self.mask {
                    h = tape.clamp01(h);
                }
            }
        }
        Ok(out)
    }
}

/// Object-centric denoiser: a temporal U-Net of attention-convolution blocks
/// with soft conditioning on the first down levels.
///
/// The struct holds layer structure only; weights live in a [`ParamStore`]
/// bound to a tape with [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: ModelConfig,
    time: TimeEmbed,
    down: Vec<Level>,
    mid: ResBlock,
    up: Vec<UpLevel>,
    head: Linear,
    cond: Option<SideNet>,
    mask: Option<SideNet>,
}

impl UNet {
    /// Builds the network and deterministically initialises its weights.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let init = &mut init;
        let cnn = cfg.arch == ArchVariant::CnnOnly;
        let scene = cfg.cnn_objects.filter(|_| cnn).unwrap_or(1);
        let width = cfg.kernel_width();
        let style = |w_heads: usize, mask: bool| BlockStyle {
            heads: w_heads,
            groups: cfg.groups,
            width,
            mask,
            attention: !cnn,
            mlp: cfg.arch != ArchVariant::NoMlp,
        };
        let main = style(cfg.heads, false);
        let td = Some(cfg.time_dim);

        let time = TimeEmbed::new(init, cfg.time_dim);
        let n = cfg.levels();
        let mut down = Vec::with_capacity(n);
        let mut prev = cfg.d_in * scene;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let blocks = (0..cfg.blocks_per_level)
                .map(|j| {
                    let din = if j == 0 { prev } else { c };
                    ResBlock::new(init, &format!("down{i}.res{j}"), din, c, &main, td)
                })
                .collect();
            let dconv = (i + 1 < n).then(|| Conv::new(init, &format!("down{i}.down"), c, c, width, 2));
            down.push(Level { blocks, down: dconv });
            prev = c;
        }
        let top = cfg.channels[n - 1];
        let mid = ResBlock::new(init, "mid", top, top, &main, td);
        let mut up = Vec::new();
        for i in (0..n - 1).rev() {
            let (c_low, c) = (cfg.channels[i + 1], cfg.channels[i]);
            let upc = Conv::new(init, &format!("up{i}.up"), c_low, c_low, width, 1);
            let blocks = (0..cfg.blocks_per_level)
                .map(|j| {
                    let din = if j == 0 { c_low + c } else { c };
                    ResBlock::new(init, &format!("up{i}.res{j}"), din, c, &main, td)
                })
                .collect();
            up.push(UpLevel { up: upc, blocks });
        }
        let head = Linear::zeros(init, "head", cfg.channels[0], cfg.d_in * scene);

        let (cond, mask) = if cfg.cond_levels == 0 {
            (None, None)
        } else {
            let cin = cfg.cond_in * scene;
            let cond = side_net(init, cfg, "cond", cin, &|c| 2 * c, &style(cfg.heads, false), false);
            let mask = side_net(init, cfg, "mask", cin, &|_| 1, &style(1, true), true);
            (Some(cond), Some(mask))
        };
        let net = Self {
            cfg: cfg.clone(),
            time,
            down,
            mid,
            up,
            head,
            cond,
            mask,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_inputs<T: Scalar>(&self, tape: &Tape<T>, x_t: Var, cond: Option<Var>) -> Result<(usize, usize)> {
        let xv = tape.value(x_t);
        if xv.rank() != 3 || xv.dims()[2] != self.cfg.d_in {
            return Err(shape_err!("denoiser input {:?}, expected [O, L, {}]", xv.dims(), self.cfg.d_in));
        }
        let (o, l) = (xv.dims()[0], xv.dims()[1]);
        if o == 0 || l == 0 {
            return Err(shape_err!("denoiser input {:?} is empty", xv.dims()));
        }
        let stride = self.cfg.stride();
        if l % stride != 0 {
            return Err(shape_err!("trajectory length {l} must be a multiple of {stride}"));
        }
        if let Some(n) = self.cfg.cnn_objects.filter(|_| self.cfg.arch == ArchVariant::CnnOnly) {
            if o != n {
                return Err(shape_err!("cnn_only model was trained for {n} objects, got {o}"));
            }
        }
        if let Some(c) = cond {
            let cv = tape.value(c);
            if cv.dims() != [o, l, self.cfg.cond_in] {
                return Err(shape_err!(
                    "conditioning input {:?}, expected [{o}, {l}, {}]",
                    cv.dims(),
                    self.cfg.cond_in
                ));
            }
        }
        Ok((o, l))
    }

    fn to_scene<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.cfg.arch != ArchVariant::CnnOnly {
            return Ok(x);
        }
        let dims = tape.value(x).dims().to_vec();
        let s = tape.swap01(x)?;
        tape.reshape(s, vec![1, dims[1], dims[0] * dims[2]])
    }

    fn from_scene<T: Scalar>(&self, tape: &mut Tape<T>, y: Var, o: usize, l: usize) -> Result<Var> {
        if self.cfg.arch != ArchVariant::CnnOnly {
            return Ok(y);
        }
        let r = tape.reshape(y, vec![l, o, self.cfg.d_in])?;
        tape.swap01(r)
    }

    /// Factor, bias and mask tensors for each conditioned residual block.
    pub fn cond_nets_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], cond_input: Var) -> Result<Vec<CondOutput>> {
        let (Some(cn), Some(mn)) = (&self.cond, &self.mask) else {
            return Ok(Vec::new());
        };
        let x = self.to_scene(tape, cond_input)?;
        let raw = cn.forward(tape, p, x)?;
        let masks = mn.forward(tape, p, x)?;
        let mut out = Vec::with_capacity(raw.len());
        for (r, m) in raw.into_iter().zip(masks) {
            let w = tape.value(r).last_dim() / 2;
            let cm = tape.slice_lastdim(r, 0, w)?;
            let c_m = tape.add_scalar(cm, T::one());
            let c_b = tape.slice_lastdim(r, w, 2 * w)?;
            out.push(CondOutput { c_m, c_b, m });
        }
        Ok(out)
    }

    /// Predicts the v-target for `x_t` at diffusion step `t`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x_t: Var,
        t: usize,
        cond_input: Option<Var>,
    ) -> Result<Var> {
        let (o, l) = self.check_inputs(tape, x_t, cond_input)?;
        let conds = match cond_input {
            Some(c) => self.cond_nets_forward(tape, p, c)?,
            None => Vec::new(),
        };
        let mut conds = conds.into_iter();
        let temb = self.time.forward(tape, p, t)?;
        let mut h = self.to_scene(tape, x_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, lvl) in self.down.iter().enumerate() {
            for block in &lvl.blocks {
                h = block.forward(tape, p, h, Some(temb))?;
                if i < self.cfg.cond_levels {
                    if let Some(c) = conds.next() {
                        h = cond_infuse(tape, h, c.c_m, c.c_b, c.m)?;
                    }
                }
            }
            skips.push(h);
            if let Some(d) = &lvl.down {
                h = d.apply(tape, p, h)?;
            }
        }
        h = self.mid.forward(tape, p, h, Some(temb))?;
        for (lvl, skip) in self.up.iter().zip(skips.iter().rev().skip(1)) {
            let u = tape.upsample2(h)?;
            let u = lvl.up.apply(tape, p, u)?;
            h = tape.concat_lastdim(u, *skip)?;
            for block in &lvl.blocks {
                h = block.forward(tape, p, h, Some(temb))?;
            }
        }
        let y = self.head.apply(tape, p, h)?;
        self.from_scene(tape, y, o, l)
    }
}

fn side_net<R: rand::Rng>(
    init: &mut Init<R>,
    cfg: &ModelConfig,
    name: &str,
    cin: usize,
    width_of: &dyn Fn(usize) -> usize,
    style: &BlockStyle,
    mask: bool,
) -> SideNet {
    let mut prev = cin;
    let mut levels = Vec::new();
    for i in 0..cfg.cond_levels {
        let c = width_of(cfg.channels[i]);
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        for j in 0..cfg.blocks_per_level {
            let din = if j == 0 { prev } else { c };
            blocks.push(ResBlock::new(init, &format!("{name}{i}.res{j}"), din, c, style, None));
            let hname = format!("{name}{i}.head{j}");
            heads.push(if mask {
                Linear::zeros(init, &hname, c, c)
            } else {
                Linear::new(init, &hname, c, c, true)
            });
        }
        let down = (i + 1 < cfg.cond_levels).then(|| Conv::new(init, &format!("{name}{i}.down"), c, c, style.width, 2));
        levels.push(SideLevel { blocks, heads, down });
        prev = c;
    }
    SideNet { levels, mask }
}

/// Soft conditioning `(M*Cm + (1-M)) * Z + M*Cb`, with the mask broadcast
/// over features. The mask must lie in `[0, 1]`.
pub fn cond_infuse<T: Scalar>(tape: &mut Tape<T>, z: Var, c_m: Var, c_b: Var, m: Var) -> Result<Var> {
    if let Some(bad) = tape
        .value(m)
        .data()
        .iter()
        .find(|v| !(**v >= T::zero() && **v <= T::one()))
    {
        return Err(Error::Contract(format!("conditioning mask value {} outside [0, 1]", bad.as_f64())));
    }
    tape.film(z, c_m, c_b, m)
}
