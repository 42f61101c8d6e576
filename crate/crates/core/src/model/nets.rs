//! Network definitions: each network's parameter layout sits next to its
//! forward pass so the names stay in step.

use super::config::ModelConfig;
use super::params::{Bound, Group, Init, ParamSpec};
use crate::compositor::{attention_crop, ObjectCanvas};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, Real, Tensor, Var};

const DOWN: ConvSpec = ConvSpec::new(2, 1);
const SAME3: ConvSpec = ConvSpec::new(1, 1);
const SAME1: ConvSpec = ConvSpec::new(1, 0);

struct Builder {
    specs: Vec<ParamSpec>,
    group: Group,
}

impl Builder {
    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) {
        self.specs.push(ParamSpec {
            name,
            shape,
            group: self.group,
            init: Init::Glorot { fan_in, fan_out },
        });
    }

    fn bias(&mut self, name: String, n: usize) {
        self.specs.push(ParamSpec {
            name,
            shape: vec![n],
            group: self.group,
            init: Init::Zeros,
        });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.weight(format!("{name}.w"), vec![cout, cin, k, k], cin * k * k, cout * k * k);
        self.bias(format!("{name}.b"), cout);
    }

    fn tconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.weight(format!("{name}.w"), vec![cin, cout, k, k], cin * k * k, cout * k * k);
        self.bias(format!("{name}.b"), cout);
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) {
        self.weight(format!("{name}.w"), vec![din, dout], din, dout);
        self.bias(format!("{name}.b"), dout);
    }
}

fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    g.conv2d(x, p.get(&format!("{name}.w")), Some(p.get(&format!("{name}.b"))), spec)
}

fn tconv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    g.conv_transpose2d(x, p.get(&format!("{name}.w")), Some(p.get(&format!("{name}.b"))), DOWN)
}

/// `x: [1, din]` to `[1, dout]`.
fn dense<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.get(&format!("{name}.w")))?;
    g.add(h, p.get(&format!("{name}.b")))
}

fn flatten<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    g.reshape(x, &[1, n])
}

fn unet_layout(b: &mut Builder, cfg: &ModelConfig) {
    let w = &cfg.unet_widths;
    let l = w.len();
    b.conv("pos.in", 3, w[0], 3);
    for i in 1..l {
        b.conv(&format!("pos.down{i}"), w[i - 1], w[i], 4);
    }
    b.conv(&format!("pos.down{l}"), w[l - 1], w[l - 1], 4);
    let mut ch = w[l - 1];
    for i in (0..l).rev() {
        b.tconv(&format!("pos.up{i}"), ch, w[i], 4);
        b.conv(&format!("pos.mix{i}"), 2 * w[i], w[i], 1);
        ch = w[i];
    }
    b.conv("pos.out", w[0], cfg.slots, 3);
}

/// Position logits `[J, N, N]` from the image `[3, N, N]` (a small U-Net).
pub fn encode_positions<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let l = cfg.unet_widths.len();
    let mut skips = Vec::with_capacity(l);
    let h = conv(g, p, "pos.in", x, SAME3)?;
    skips.push(g.elu(h));
    for i in 1..l {
        let h = conv(g, p, &format!("pos.down{i}"), skips[i - 1], DOWN)?;
        skips.push(g.elu(h));
    }
    let h = conv(g, p, &format!("pos.down{l}"), skips[l - 1], DOWN)?;
    let mut h = g.elu(h);
    for i in (0..l).rev() {
        let up = tconv(g, p, &format!("pos.up{i}"), h)?;
        let up = g.elu(up);
        let cat = g.concat(&[up, skips[i]], 0)?;
        let mixed = conv(g, p, &format!("pos.mix{i}"), cat, SAME1)?;
        h = g.elu(mixed);
    }
    conv(g, p, "pos.out", h, SAME3)
}

fn encoder_layout(b: &mut Builder, cfg: &ModelConfig, prefix: &str, cin: usize, side: usize, dim: usize) {
    let w = &cfg.encoder_widths;
    let mut c = cin;
    for (i, &wi) in w.iter().enumerate() {
        b.conv(&format!("{prefix}.conv{i}"), c, wi, 4);
        c = wi;
    }
    let s = side >> w.len();
    b.dense(&format!("{prefix}.hidden"), c * s * s, cfg.encoder_hidden);
    b.dense(&format!("{prefix}.out"), cfg.encoder_hidden, 2 * dim);
}

/// Strided conv stack, then two dense layers; returns `[1, 2 * dim]`.
fn encode<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, prefix: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..cfg.encoder_widths.len() {
        let c = conv(g, p, &format!("{prefix}.conv{i}"), h, DOWN)?;
        h = g.elu(c);
    }
    let flat = flatten(g, h)?;
    let hidden = dense(g, p, &format!("{prefix}.hidden"), flat)?;
    let hidden = g.elu(hidden);
    dense(g, p, &format!("{prefix}.out"), hidden)
}

fn decoder_layout(b: &mut Builder, widths: &[usize], prefix: &str, din: usize, side: usize, cout: usize) {
    let base = side >> widths.len();
    b.dense(&format!("{prefix}.fc"), din, widths[0] * base * base);
    for i in 0..widths.len() {
        let out = widths.get(i + 1).copied().unwrap_or(cout);
        b.tconv(&format!("{prefix}.up{i}"), widths[i], out, 4);
    }
}

/// Dense layer onto a coarse grid, then stride-2 transpose convolutions;
/// returns pre-activation `[cout, side, side]`.
fn decode<T: Real>(g: &mut Graph<T>, p: &Bound, widths: &[usize], prefix: &str, z: Var, side: usize) -> Result<Var> {
    let base = side >> widths.len();
    let din = g.value(z).len();
    let z = g.reshape(z, &[1, din])?;
    let h = dense(g, p, &format!("{prefix}.fc"), z)?;
    let h = g.elu(h);
    let mut h = g.reshape(h, &[widths[0], base, base])?;
    for i in 0..widths.len() {
        h = tconv(g, p, &format!("{prefix}.up{i}"), h)?;
        if i + 1 < widths.len() {
            h = g.elu(h);
        }
    }
    Ok(h)
}

fn dense_pair_layout(b: &mut Builder, prefix: &str, din: usize, hidden: usize, dout: usize) {
    b.dense(&format!("{prefix}.hidden"), din, hidden);
    b.dense(&format!("{prefix}.out"), hidden, dout);
}

fn dense_pair<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = dense(g, p, &format!("{prefix}.hidden"), x)?;
    let h = g.elu(h);
    dense(g, p, &format!("{prefix}.out"), h)
}

/// All parameters, in checkpoint order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (n, m, j) = (cfg.image_size, cfg.canvas_size, cfg.slots);
    let d_obj = cfg.object_dim + 1;
    let mut b = Builder {
        specs: Vec::new(),
        group: Group::PositionEncoder,
    };
    unet_layout(&mut b, cfg);
    b.group = Group::ObjectEncoder;
    if cfg.attention_crop {
        encoder_layout(&mut b, cfg, "obj.enc", 3, m, d_obj);
    } else {
        encoder_layout(&mut b, cfg, "obj.enc", 4, n, d_obj);
    }
    b.group = Group::BackgroundEncoder;
    encoder_layout(&mut b, cfg, "bg.enc", 3, n, cfg.background_dim);
    b.group = Group::ObjectDecoder;
    decoder_layout(&mut b, &cfg.decoder_widths, "obj.dec", cfg.object_dim, m, 4);
    b.group = Group::BackgroundDecoder;
    decoder_layout(&mut b, &cfg.decoder_widths, "bg.dec", cfg.background_dim, n, 3);
    b.group = Group::PositionPrior;
    decoder_layout(&mut b, &cfg.position_prior_widths, "pp", cfg.zeta_dim(), n, j);
    b.group = Group::ObjectPrior;
    dense_pair_layout(&mut b, "xi", cfg.xi_dim() + 4, cfg.prior_hidden, 2 * d_obj);
    b.group = Group::SceneEncoder;
    dense_pair_layout(&mut b, "scene", j * (d_obj + 2), cfg.prior_hidden, 2 * cfg.scene_dim);
    b.specs
}

/// Posterior parameters `[1, 2 * (D_obj + 1)]` for one object given its
/// position map `theta: [N, N]`.
pub fn encode_object<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, x: Var, theta: Var) -> Result<Var> {
    let input = if cfg.attention_crop {
        attention_crop(g, x, theta, cfg.canvas_size)?
    } else {
        let n = cfg.image_size;
        let t = g.reshape(theta, &[1, n, n])?;
        g.concat(&[x, t], 0)?
    };
    encode(g, p, cfg, "obj.enc", input)
}

/// Posterior parameters `[1, 2 * D_bg]`.
pub fn encode_background<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, x: Var) -> Result<Var> {
    encode(g, p, cfg, "bg.enc", x)
}

/// Canvas from an appearance latent `z: [D_obj]`; shared by all slots.
pub fn decode_object<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, z: Var) -> Result<ObjectCanvas> {
    let m = cfg.canvas_size;
    let raw = decode(g, p, &cfg.decoder_widths, "obj.dec", z, m)?;
    let out = g.sigmoid(raw);
    let pixels = g.slice(out, 0, 0, 3)?;
    let alpha = g.slice(out, 0, 3, 1)?;
    let alpha = g.reshape(alpha, &[m, m])?;
    Ok(ObjectCanvas { pixels, alpha })
}

/// Background image `[3, N, N]`.
pub fn decode_background<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, z_bg: Var) -> Result<Var> {
    let raw = decode(g, p, &cfg.decoder_widths, "bg.dec", z_bg, cfg.image_size)?;
    Ok(g.sigmoid(raw))
}

fn require_hyperprior(cfg: &ModelConfig) -> Result<()> {
    if cfg.hyperprior {
        Ok(())
    } else {
        Err(Error::Config("the scene-level hyperprior is disabled".into()))
    }
}

/// Prior position logits `[J, N, N]` from the first `zeta_dim` elements of `y`.
pub fn position_prior<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, y: Var) -> Result<Var> {
    require_hyperprior(cfg)?;
    let y = g.reshape(y, &[cfg.scene_dim])?;
    let yz = g.slice(y, 0, 0, cfg.zeta_dim())?;
    decode(g, p, &cfg.position_prior_widths, "pp", yz, cfg.image_size)
}

/// Expected normalised coordinates `[1, 2]` (`x` then `y`, each in [-1, 1])
/// of a position map `[N, N]`.
pub fn expected_coords<T: Real>(g: &mut Graph<T>, theta: Var) -> Result<Var> {
    let shape = g.shape(theta).to_vec();
    let (h, w) = (shape[0], shape[1]);
    let grid = Tensor::from_fn(vec![h * w, 2], |i| {
        let (cell, axis) = (i / 2, i % 2);
        let (r, c) = (cell / w, cell % w);
        let v = if axis == 0 {
            2.0 * (c as f64 + 0.5) / w as f64 - 1.0
        } else {
            2.0 * (r as f64 + 0.5) / h as f64 - 1.0
        };
        T::of(v)
    });
    let grid = g.constant(grid);
    let flat = g.reshape(theta, &[1, h * w])?;
    g.matmul(flat, grid)
}

/// Prior parameters `[1, 2 * (D_obj + 1)]` over each object's `(z, depth
/// logit)`, from the last `xi_dim` elements of `y` and the objects'
/// coordinates `[1, 2]`. Every slot sees its own coordinates and the mean of
/// all, so the map is symmetric under slot permutation.
pub fn object_prior<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, y: Var, coords: &[Var]) -> Result<Vec<Var>> {
    require_hyperprior(cfg)?;
    let y = g.reshape(y, &[cfg.scene_dim])?;
    let yx = g.slice(y, 0, cfg.zeta_dim(), cfg.xi_dim())?;
    let yx = g.reshape(yx, &[1, cfg.xi_dim()])?;
    let all = g.concat(coords, 0)?;
    let mean = g.reduce(crate::tensor::ReduceOp::Mean, all, &[0])?;
    let mean = g.reshape(mean, &[1, 2])?;
    coords
        .iter()
        .map(|&c| {
            let input = g.concat(&[yx, c, mean], 1)?;
            dense_pair(g, p, "xi", input)
        })
        .collect()
}

/// Posterior parameters `[1, 2 * D_scene]` for `y` from each object's
/// `(z, depth logit)` summary `[1, D_obj + 1]` and coordinates `[1, 2]`.
pub fn encode_scene<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    objects: &[Var],
    coords: &[Var],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * objects.len());
    for (o, c) in objects.iter().zip(coords) {
        parts.push(*o);
        parts.push(*c);
    }
    let input = g.concat(&parts, 1)?;
    dense_pair(g, p, "scene", input)
}
