//! The disentangling hypernetwork: trajectory transformer encoder, invariant
//! and environment heads, function decoder, and environment discriminator.
//!
//! All MLPs place one layer normalization before each ReLU. The encoder uses
//! pre-norm blocks and mean-pools token outputs into the function embedding.

use std::collections::HashMap;

use thiserror::Error;

use crate::hyperexec::{build_layout, DerivNetSpec};
use crate::rng::Stream;
use crate::tensor::{Array, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
}

impl EncoderSpec {
    /// Small spec for fast runs on plain CPUs.
    pub fn desk_scale() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
        }
    }

    /// The full-size configuration: 6 layers, 8 heads, 256-wide FFN.
    pub fn paper_scale() -> Self {
        Self {
            layers: 6,
            heads: 8,
            model_dim: 256,
            ffn_dim: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    /// Function-embedding width shared by both heads and the decoder input.
    pub embed_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscSpec {
    pub layers: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub deriv: DerivNetSpec,
    pub disc: DiscSpec,
    pub n_envs: usize,
}

impl ModelSpec {
    pub fn desk_scale(state_dim: usize) -> Self {
        Self {
            encoder: EncoderSpec::desk_scale(),
            head: HeadSpec { embed_dim: 32 },
            deriv: DerivNetSpec::new(state_dim, 4, 16),
            disc: DiscSpec {
                layers: 3,
                width: 64,
            },
            n_envs: 4,
        }
    }

    /// Length of the decoded function vector.
    pub fn m(&self) -> usize {
        build_layout(&self.deriv).m()
    }
}

/// Parameter groups of the model. The discriminator is adversary-side; the
/// other four together form the hypernetwork parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    InvHead,
    EnvHead,
    Decoder,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::InvHead,
        ParamGroup::EnvHead,
        ParamGroup::Decoder,
        ParamGroup::Discriminator,
    ];

    /// The hypernetwork parameters (everything except the discriminator).
    pub const HYPERNET: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::InvHead,
        ParamGroup::EnvHead,
        ParamGroup::Decoder,
    ];

    /// Parameters updated alongside the discriminator: the encoder and the
    /// environment head, which own the environment-information pathway.
    pub const ENV_SIDE: [ParamGroup; 3] = [
        ParamGroup::Discriminator,
        ParamGroup::Encoder,
        ParamGroup::EnvHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::InvHead => "inv_head",
            ParamGroup::EnvHead => "env_head",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Discriminator => "discriminator",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array,
}

/// The model: a flat list of named, grouped parameters plus its spec.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Model {
    /// Initializes all parameters with uniform fan-in scaling. The decoder's
    /// final layer is shrunk so freshly decoded derivative networks start
    /// near zero.
    pub fn init(spec: ModelSpec, rng: &mut Stream) -> Self {
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        let d = spec.deriv.state_dim;
        let dm = spec.encoder.model_dim;
        let e = spec.head.embed_dim;

        b.linear(ParamGroup::Encoder, "enc.embed", d, dm);
        for l in 0..spec.encoder.layers {
            let p = format!("enc.l{l}");
            b.norm(ParamGroup::Encoder, &format!("{p}.ln1"), dm);
            b.linear(ParamGroup::Encoder, &format!("{p}.attn.qkv"), dm, 3 * dm);
            b.linear(ParamGroup::Encoder, &format!("{p}.attn.out"), dm, dm);
            b.norm(ParamGroup::Encoder, &format!("{p}.ln2"), dm);
            b.linear(ParamGroup::Encoder, &format!("{p}.ffn.in"), dm, spec.encoder.ffn_dim);
            b.norm(ParamGroup::Encoder, &format!("{p}.ffn.ln"), spec.encoder.ffn_dim);
            b.linear(ParamGroup::Encoder, &format!("{p}.ffn.out"), spec.encoder.ffn_dim, dm);
        }
        b.norm(ParamGroup::Encoder, "enc.final_ln", dm);

        b.mlp3(ParamGroup::InvHead, "inv", dm, e, e);
        b.mlp3(ParamGroup::EnvHead, "env", dm, e, e);
        b.mlp3(ParamGroup::Decoder, "dec", e, e, spec.m());
        // Near-zero initial function vectors keep early integration bounded.
        b.scale_last_linear("dec.l2", 0.01);

        let disc_dims: Vec<usize> = std::iter::once(e)
            .chain(std::iter::repeat(spec.disc.width).take(spec.disc.layers - 1))
            .chain(std::iter::once(spec.n_envs))
            .collect();
        for l in 0..spec.disc.layers {
            b.linear(
                ParamGroup::Discriminator,
                &format!("disc.l{l}"),
                disc_dims[l],
                disc_dims[l + 1],
            );
            if l + 1 < spec.disc.layers {
                b.norm(
                    ParamGroup::Discriminator,
                    &format!("disc.l{l}.ln"),
                    disc_dims[l + 1],
                );
            }
        }

        let params = b.params;
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self {
            spec,
            params,
            index,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Param {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.index[name]
    }

    /// Total number of scalar parameters in the given groups.
    pub fn count(&self, groups: &[ParamGroup]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.value.len())
            .sum()
    }

    /// Registers every parameter on the tape; parameters whose group is in
    /// `trainable` become gradient-tracked leaves, the rest constants.
    pub fn register(&self, tape: &mut Tape, trainable: &[ParamGroup]) -> ModelVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable.contains(&p.group) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        ModelVars { vars }
    }
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut Stream,
}

impl Builder<'_> {
    fn push(&mut self, group: ParamGroup, name: String, value: Array) {
        self.params.push(Param { name, group, value });
    }

    fn linear(&mut self, group: ParamGroup, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| self.rng.uniform(-bound, bound))
            .collect();
        let b: Vec<f64> = (0..fan_out).map(|_| self.rng.uniform(-bound, bound)).collect();
        self.push(group, format!("{prefix}.w"), Array::from_vec(&[fan_in, fan_out], w));
        self.push(group, format!("{prefix}.b"), Array::from_vec(&[fan_out], b));
    }

    fn norm(&mut self, group: ParamGroup, prefix: &str, dim: usize) {
        self.push(group, format!("{prefix}.g"), Array::full(&[dim], 1.0));
        self.push(group, format!("{prefix}.b"), Array::zeros(&[dim]));
    }

    /// Three linear layers with LayerNorm before each of the two ReLUs.
    fn mlp3(&mut self, group: ParamGroup, prefix: &str, in_dim: usize, hidden: usize, out: usize) {
        self.linear(group, &format!("{prefix}.l0"), in_dim, hidden);
        self.norm(group, &format!("{prefix}.l0.ln"), hidden);
        self.linear(group, &format!("{prefix}.l1"), hidden, hidden);
        self.norm(group, &format!("{prefix}.l1.ln"), hidden);
        self.linear(group, &format!("{prefix}.l2"), hidden, out);
    }

    fn scale_last_linear(&mut self, prefix: &str, factor: f64) {
        for suffix in [".w", ".b"] {
            let name = format!("{prefix}{suffix}");
            let p = self
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .expect("scaled layer exists");
            for v in p.value.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Tape handles for every model parameter, aligned with `Model::params()`.
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn var(&self, model: &Model, name: &str) -> Var {
        self.vars[model.index_of(name)]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    /// Rebind to externally supplied vars (used by gradient checking).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ModelVars { vars }
    }
}

/// Sinusoidal position table: `PE[k, 2i] = sin(k / 10000^(2i/dim))` and the
/// cosine in the odd column.
pub fn freq_positional_encoding(len: usize, dim: usize) -> Array {
    assert!(dim % 2 == 0, "positional encoding needs an even dimension");
    let mut table = Array::zeros(&[len, dim]);
    for k in 0..len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = k as f64 * rate;
            table.data_mut()[k * dim + 2 * i] = angle.sin();
            table.data_mut()[k * dim + 2 * i + 1] = angle.cos();
        }
    }
    table
}

fn linear(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    prefix: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let w = vars.var(model, &format!("{prefix}.w"));
    let b = vars.var(model, &format!("{prefix}.b"));
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

fn layer_norm(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    prefix: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let g = vars.var(model, &format!("{prefix}.g"));
    let b = vars.var(model, &format!("{prefix}.b"));
    tape.layer_norm(x, g, b)
}

/// Encodes a batch of normalized past windows `(B, T_c, d)` into function
/// representations `(B, model_dim)`.
pub fn encode(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    xp: Var,
) -> Result<Var, TensorError> {
    let spec = model.spec.encoder;
    let (b, t_c, d) = {
        let s = tape.value(xp).shape();
        if s.len() != 3 {
            return Err(TensorError::Invalid {
                op: "encode",
                msg: format!("expected (B, T_c, d) input, got {s:?}"),
            });
        }
        (s[0], s[1], s[2])
    };
    let dm = spec.model_dim;
    let heads = spec.heads;
    let dh = dm / heads;

    // Per-timestep embedding plus the position table.
    let flat = tape.reshape(xp, &[b * t_c, d])?;
    let tokens = linear(tape, model, vars, "enc.embed", flat)?;
    let mut x = tape.reshape(tokens, &[b, t_c, dm])?;
    let table = tape.constant(freq_positional_encoding(t_c, dm));
    x = tape.add(x, table)?;

    for l in 0..spec.layers {
        let p = format!("enc.l{l}");
        // Pre-norm attention block.
        let normed = layer_norm(tape, model, vars, &format!("{p}.ln1"), x)?;
        let flat = tape.reshape(normed, &[b * t_c, dm])?;
        let qkv = linear(tape, model, vars, &format!("{p}.attn.qkv"), flat)?;
        let q = tape.slice(qkv, 1, 0, dm)?;
        let k = tape.slice(qkv, 1, dm, 2 * dm)?;
        let v = tape.slice(qkv, 1, 2 * dm, 3 * dm)?;
        let split = |tape: &mut Tape, t: Var| -> Result<Var, TensorError> {
            let t4 = tape.reshape(t, &[b, t_c, heads, dh])?;
            let t4 = tape.transpose(t4, &[0, 2, 1, 3])?;
            tape.reshape(t4, &[b * heads, t_c, dh])
        };
        let q = split(tape, q)?;
        let k = split(tape, k)?;
        let v = split(tape, v)?;
        let kt = tape.transpose(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores)?;
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.reshape(ctx, &[b, heads, t_c, dh])?;
        let ctx = tape.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * t_c, dm])?;
        let proj = linear(tape, model, vars, &format!("{p}.attn.out"), ctx)?;
        let proj = tape.reshape(proj, &[b, t_c, dm])?;
        x = tape.add(x, proj)?;

        // Pre-norm feed-forward block, LayerNorm before the activation.
        let normed = layer_norm(tape, model, vars, &format!("{p}.ln2"), x)?;
        let flat = tape.reshape(normed, &[b * t_c, dm])?;
        let hidden = linear(tape, model, vars, &format!("{p}.ffn.in"), flat)?;
        let hidden = layer_norm(tape, model, vars, &format!("{p}.ffn.ln"), hidden)?;
        let hidden = tape.relu(hidden)?;
        let out = linear(tape, model, vars, &format!("{p}.ffn.out"), hidden)?;
        let out = tape.reshape(out, &[b, t_c, dm])?;
        x = tape.add(x, out)?;
    }

    let x = layer_norm(tape, model, vars, "enc.final_ln", x)?;
    // Mean-pool the token axis into one function representation per sample.
    tape.mean_axis(x, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Invariant,
    Environment,
}

fn mlp3_forward(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    prefix: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let mut h = linear(tape, model, vars, &format!("{prefix}.l0"), x)?;
    h = layer_norm(tape, model, vars, &format!("{prefix}.l0.ln"), h)?;
    h = tape.relu(h)?;
    h = linear(tape, model, vars, &format!("{prefix}.l1"), h)?;
    h = layer_norm(tape, model, vars, &format!("{prefix}.l1.ln"), h)?;
    h = tape.relu(h)?;
    linear(tape, model, vars, &format!("{prefix}.l2"), h)
}

/// Projects the encoder output into one of the two function embeddings.
pub fn head(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    which: HeadKind,
    z: Var,
) -> Result<Var, TensorError> {
    let prefix = match which {
        HeadKind::Invariant => "inv",
        HeadKind::Environment => "env",
    };
    mlp3_forward(tape, model, vars, prefix, z)
}

/// Combines the invariant and environment embeddings by summation.
pub fn compose(tape: &mut Tape, z_c: Var, z_e: Var) -> Result<Var, TensorError> {
    tape.add(z_c, z_e)
}

/// Decodes a function embedding into flat derivative-network parameters.
pub fn decode(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    z: Var,
) -> Result<Var, TensorError> {
    mlp3_forward(tape, model, vars, "dec", z)
}

/// Environment logits from a function embedding.
pub fn discriminate(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    z: Var,
) -> Result<Var, TensorError> {
    let layers = model.spec.disc.layers;
    let mut h = z;
    for l in 0..layers {
        h = linear(tape, model, vars, &format!("disc.l{l}"), h)?;
        if l + 1 < layers {
            h = layer_norm(tape, model, vars, &format!("disc.l{l}.ln"), h)?;
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

// ---- checkpoints ---------------------------------------------------------

pub mod checkpoint {
    use std::fs;
    use std::io::{BufWriter, Write};
    use std::path::Path;

    use super::*;
    use crate::systems::SystemId;

    const HEADER: &str = "difmodel v1";

    /// Everything needed to run the model on new data.
    #[derive(Debug, Clone)]
    pub struct RunInfo {
        pub system: SystemId,
        pub t_c: usize,
        pub norm_mean: Vec<f64>,
        pub norm_std: Vec<f64>,
    }

    fn fmt_f64(v: f64) -> String {
        format!("{v:.16e}")
    }

    pub fn save(model: &Model, info: &RunInfo, path: &Path) -> Result<(), NetError> {
        let io_err = |source| NetError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(io_err)?;
            }
        }
        let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
        let spec = &model.spec;
        let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
            writeln!(w, "{HEADER}")?;
            writeln!(w, "system={}", info.system.name())?;
            writeln!(w, "t_c={}", info.t_c)?;
            writeln!(
                w,
                "norm_mean={}",
                info.norm_mean.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(",")
            )?;
            writeln!(
                w,
                "norm_std={}",
                info.norm_std.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(",")
            )?;
            writeln!(w, "enc.layers={}", spec.encoder.layers)?;
            writeln!(w, "enc.heads={}", spec.encoder.heads)?;
            writeln!(w, "enc.model_dim={}", spec.encoder.model_dim)?;
            writeln!(w, "enc.ffn_dim={}", spec.encoder.ffn_dim)?;
            writeln!(w, "head.embed_dim={}", spec.head.embed_dim)?;
            writeln!(w, "deriv.state_dim={}", spec.deriv.state_dim)?;
            writeln!(w, "deriv.depth={}", spec.deriv.depth)?;
            writeln!(w, "deriv.width={}", spec.deriv.width)?;
            writeln!(w, "disc.layers={}", spec.disc.layers)?;
            writeln!(w, "disc.width={}", spec.disc.width)?;
            writeln!(w, "n_envs={}", spec.n_envs)?;
            for p in model.params() {
                write!(w, "param {} {} {}", p.name, p.group.name(), p.value.rank())?;
                for dim in p.value.shape() {
                    write!(w, " {dim}")?;
                }
                for v in p.value.data() {
                    write!(w, " {}", fmt_f64(*v))?;
                }
                writeln!(w)?;
            }
            Ok(())
        };
        write(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<(Model, RunInfo), NetError> {
        let text = fs::read_to_string(path).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let err = |line: usize, msg: &str| NetError::Format {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file"))?;
        if header.trim() != HEADER {
            return Err(err(1, "unrecognized checkpoint header"));
        }

        let mut kv = HashMap::new();
        let mut params: Vec<(usize, String)> = Vec::new();
        for (i, line) in lines {
            if line.starts_with("param ") {
                params.push((i + 1, line.to_string()));
            } else if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            } else if !line.trim().is_empty() {
                return Err(err(i + 1, "expected key=value or param line"));
            }
        }
        let get = |k: &str| -> Result<String, NetError> {
            kv.get(k).cloned().ok_or_else(|| NetError::Format {
                line: 0,
                msg: format!("missing key `{k}`"),
            })
        };
        let get_usize = |k: &str| -> Result<usize, NetError> {
            get(k)?.parse().map_err(|_| NetError::Format {
                line: 0,
                msg: format!("bad integer for `{k}`"),
            })
        };
        let parse_vec = |k: &str| -> Result<Vec<f64>, NetError> {
            get(k)?
                .split(',')
                .map(|s| {
                    s.parse::<f64>().map_err(|_| NetError::Format {
                        line: 0,
                        msg: format!("bad float in `{k}`"),
                    })
                })
                .collect()
        };

        let spec = ModelSpec {
            encoder: EncoderSpec {
                layers: get_usize("enc.layers")?,
                heads: get_usize("enc.heads")?,
                model_dim: get_usize("enc.model_dim")?,
                ffn_dim: get_usize("enc.ffn_dim")?,
            },
            head: HeadSpec {
                embed_dim: get_usize("head.embed_dim")?,
            },
            deriv: DerivNetSpec::new(
                get_usize("deriv.state_dim")?,
                get_usize("deriv.depth")?,
                get_usize("deriv.width")?,
            ),
            disc: DiscSpec {
                layers: get_usize("disc.layers")?,
                width: get_usize("disc.width")?,
            },
            n_envs: get_usize("n_envs")?,
        };
        let info = RunInfo {
            system: SystemId::from_name(&get("system")?).map_err(|e| NetError::Format {
                line: 0,
                msg: e.to_string(),
            })?,
            t_c: get_usize("t_c")?,
            norm_mean: parse_vec("norm_mean")?,
            norm_std: parse_vec("norm_std")?,
        };

        // Rebuild the parameter list in file order and verify it matches a
        // fresh instantiation of the spec.
        let mut loaded = Vec::new();
        for (line_no, line) in &params {
            let mut toks = line.split_whitespace();
            toks.next(); // "param"
            let name = toks
                .next()
                .ok_or_else(|| err(*line_no, "missing name"))?
                .to_string();
            let group = ParamGroup::from_name(
                toks.next().ok_or_else(|| err(*line_no, "missing group"))?,
            )
            .ok_or_else(|| err(*line_no, "unknown group"))?;
            let rank: usize = toks
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(*line_no, "bad rank"))?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    toks.next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(*line_no, "bad shape"))?,
                );
            }
            let data: Vec<f64> = toks
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| err(*line_no, "bad parameter value"))
                })
                .collect::<Result<_, _>>()?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(err(*line_no, "value count does not match shape"));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(err(*line_no, "non-finite parameter value"));
            }
            loaded.push(Param {
                name,
                group,
                value: Array::from_vec(&shape, data),
            });
        }

        let mut rng = Stream::seed_from_u64(0);
        let mut model = Model::init(spec, &mut rng);
        if model.params().len() != loaded.len() {
            return Err(NetError::Format {
                line: 0,
                msg: format!(
                    "expected {} parameters for this spec, found {}",
                    model.params().len(),
                    loaded.len()
                ),
            });
        }
        for (slot, p) in model.params_mut().iter_mut().zip(loaded) {
            if slot.name != p.name || slot.group != p.group || slot.value.shape() != p.value.shape()
            {
                return Err(NetError::Format {
                    line: 0,
                    msg: format!("parameter `{}` does not match the spec layout", p.name),
                });
            }
            slot.value = p.value;
        }
        Ok((model, info))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            encoder: EncoderSpec {
                layers: 2,
                heads: 2,
                model_dim: 8,
                ffn_dim: 8,
            },
            head: HeadSpec { embed_dim: 4 },
            deriv: DerivNetSpec::new(2, 2, 4),
            disc: DiscSpec {
                layers: 3,
                width: 8,
            },
            n_envs: 4,
        }
    }

    fn tiny_model(seed: u64) -> Model {
        let mut rng = Stream::seed_from_u64(seed);
        Model::init(tiny_spec(), &mut rng)
    }

    fn window(b: usize, t_c: usize, d: usize, seed: u64) -> Array {
        let mut rng = Stream::seed_from_u64(seed);
        Array::from_vec(
            &[b, t_c, d],
            (0..b * t_c * d).map(|_| rng.normal()).collect(),
        )
    }

    #[test]
    fn parameter_groups_partition_the_model() {
        let model = tiny_model(3);
        let mut seen = HashSet::new();
        for p in model.params() {
            assert!(seen.insert(p.name.clone()), "duplicate name {}", p.name);
        }
        let by_group = |gs: &[ParamGroup]| -> HashSet<String> {
            model
                .params()
                .iter()
                .filter(|p| gs.contains(&p.group))
                .map(|p| p.name.clone())
                .collect()
        };
        let all = by_group(&ParamGroup::ALL);
        let hyper = by_group(&ParamGroup::HYPERNET);
        let disc = by_group(&[ParamGroup::Discriminator]);
        assert_eq!(hyper.len() + disc.len(), all.len());
        assert!(hyper.is_disjoint(&disc));
        // Shared-parameter views used by the two training sub-updates.
        let inv_side = by_group(&[ParamGroup::Encoder, ParamGroup::InvHead]);
        let env_side = by_group(&[ParamGroup::Encoder, ParamGroup::EnvHead]);
        let enc = by_group(&[ParamGroup::Encoder]);
        let overlap: HashSet<_> = inv_side.intersection(&env_side).cloned().collect();
        assert_eq!(overlap, enc);
    }

    #[test]
    fn positional_table_first_row_alternates_zero_one() {
        let table = freq_positional_encoding(8, 6);
        for i in 0..3 {
            assert_eq!(table.data()[2 * i], 0.0);
            assert_eq!(table.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn positional_table_is_bounded_and_rows_distinct() {
        let table = freq_positional_encoding(512, 16);
        assert!(table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let mut rows = HashSet::new();
        for k in 0..512 {
            let row: Vec<u64> = table.data()[k * 16..(k + 1) * 16]
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert!(rows.insert(row), "row {k} duplicates an earlier row");
        }
    }

    #[test]
    fn encode_output_shape_is_model_dim_for_any_window_length() {
        let model = tiny_model(5);
        for t_c in [3, 7, 12] {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, &[]);
            let xp = tape.constant(window(2, t_c, 2, 11));
            let z = encode(&mut tape, &model, &vars, xp).unwrap();
            assert_eq!(tape.value(z).shape(), &[2, 8]);
        }
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let model = tiny_model(6);
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, &[]);
        let one = window(1, 5, 2, 21);
        let mut both = Vec::new();
        both.extend_from_slice(one.data());
        both.extend_from_slice(one.data());
        let xp = tape.constant(Array::from_vec(&[2, 5, 2], both));
        let z = encode(&mut tape, &model, &vars, xp).unwrap();
        let zv = tape.value(z);
        assert_eq!(zv.data()[..8], zv.data()[8..]);
    }

    #[test]
    fn permuting_time_steps_changes_the_encoding() {
        let model = tiny_model(7);
        let base = window(1, 6, 2, 31);
        let mut swapped_data = base.data().to_vec();
        // Swap timesteps 0 and 3 of the single sample.
        for dim in 0..2 {
            swapped_data.swap(dim, 3 * 2 + dim);
        }
        let encode_one = |input: Array| {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, &[]);
            let xp = tape.constant(input);
            let z = encode(&mut tape, &model, &vars, xp).unwrap();
            tape.value(z).data().to_vec()
        };
        let a = encode_one(base);
        let b = encode_one(Array::from_vec(&[1, 6, 2], swapped_data));
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn compose_is_symmetric_and_zero_is_identity() {
        let model = tiny_model(8);
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, &[]);
        let xp = tape.constant(window(3, 4, 2, 41));
        let z = encode(&mut tape, &model, &vars, xp).unwrap();
        let zc = head(&mut tape, &model, &vars, HeadKind::Invariant, z).unwrap();
        let ze = head(&mut tape, &model, &vars, HeadKind::Environment, z).unwrap();
        assert_eq!(tape.value(zc).shape(), &[3, 4]);
        let ab = compose(&mut tape, zc, ze).unwrap();
        let ba = compose(&mut tape, ze, zc).unwrap();
        assert_eq!(tape.value(ab).data(), tape.value(ba).data());
        let zero = tape.constant(Array::zeros(&[3, 4]));
        let same = compose(&mut tape, zc, zero).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(zc).data());
    }

    #[test]
    fn decode_length_matches_layout_and_differs_between_embeddings() {
        let model = tiny_model(9);
        let m = model.spec.m();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, &[]);
        let xp = tape.constant(window(2, 4, 2, 51));
        let z = encode(&mut tape, &model, &vars, xp).unwrap();
        let zc = head(&mut tape, &model, &vars, HeadKind::Invariant, z).unwrap();
        let ze = head(&mut tape, &model, &vars, HeadKind::Environment, z).unwrap();
        let zfull = compose(&mut tape, zc, ze).unwrap();
        let f_full = decode(&mut tape, &model, &vars, zfull).unwrap();
        let f_inv = decode(&mut tape, &model, &vars, zc).unwrap();
        assert_eq!(tape.value(f_full).shape(), &[2, m]);
        assert!(tape
            .value(f_full)
            .data()
            .iter()
            .zip(tape.value(f_inv).data())
            .any(|(a, b)| (a - b).abs() > 1e-12));
    }

    #[test]
    fn decode_is_deterministic() {
        let model = tiny_model(10);
        let run = || {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, &[]);
            let z = tape.constant(window(2, 1, 4, 61).reshaped(&[2, 4]));
            let f = decode(&mut tape, &model, &vars, z).unwrap();
            tape.value(f).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zeroing_env_head_output_layer_makes_functions_coincide() {
        let mut model = tiny_model(12);
        for v in model.param_mut("env.l2.w").value.data_mut() {
            *v = 0.0;
        }
        for v in model.param_mut("env.l2.b").value.data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, &[]);
        let xp = tape.constant(window(2, 4, 2, 71));
        let z = encode(&mut tape, &model, &vars, xp).unwrap();
        let zc = head(&mut tape, &model, &vars, HeadKind::Invariant, z).unwrap();
        let ze = head(&mut tape, &model, &vars, HeadKind::Environment, z).unwrap();
        assert!(tape.value(ze).data().iter().all(|&v| v == 0.0));
        let zfull = compose(&mut tape, zc, ze).unwrap();
        let f_full = decode(&mut tape, &model, &vars, zfull).unwrap();
        let f_inv = decode(&mut tape, &model, &vars, zc).unwrap();
        assert_eq!(tape.value(f_full).data(), tape.value(f_inv).data());
    }

    #[test]
    fn discriminator_logit_shape_matches_env_count() {
        let model = tiny_model(13);
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, &[]);
        let z = tape.constant(Array::zeros(&[5, 4]));
        let logits = discriminate(&mut tape, &model, &vars, z).unwrap();
        assert_eq!(tape.value(logits).shape(), &[5, 4]);
        let nll = tape.cross_entropy_logits(logits, &[0, 1, 2, 3, 0]).unwrap();
        assert!(tape.value(nll).item().is_finite());
    }

    #[test]
    fn full_forward_gradient_checks_on_tiny_spec() {
        use crate::tensor::grad_check;
        let model = tiny_model(14);
        let xp = window(2, 4, 2, 81);
        let leaves: Vec<Array> = model.params().iter().map(|p| p.value.clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let mv = ModelVars::from_vars(vars.to_vec());
                let x = tape.constant(xp.clone());
                let z = encode(tape, &model, &mv, x)?;
                let zc = head(tape, &model, &mv, HeadKind::Invariant, z)?;
                let ze = head(tape, &model, &mv, HeadKind::Environment, z)?;
                let zfull = compose(tape, zc, ze)?;
                let f = decode(tape, &model, &mv, zfull)?;
                let sq = tape.mul(f, f)?;
                tape.sum(sq)
            },
            &leaves,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = tiny_model(15);
        let info = checkpoint::RunInfo {
            system: crate::systems::SystemId::Pendulum,
            t_c: 33,
            norm_mean: vec![0.25, -0.5],
            norm_std: vec![1.5, 0.75],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint::save(&model, &info, &path).unwrap();
        let (loaded, info2) = checkpoint::load(&path).unwrap();
        assert_eq!(loaded.spec, model.spec);
        assert_eq!(info2.t_c, info.t_c);
        assert_eq!(info2.norm_mean, info.norm_mean);
        assert_eq!(info2.norm_std, info.norm_std);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let model = tiny_model(16);
        let info = checkpoint::RunInfo {
            system: crate::systems::SystemId::Pendulum,
            t_c: 33,
            norm_mean: vec![0.0, 0.0],
            norm_std: vec![1.0, 1.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint::save(&model, &info, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let bad = text.replace("difmodel v1", "somethingelse v9");
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(
            checkpoint::load(&path),
            Err(NetError::Format { .. })
        ));
    }
}
