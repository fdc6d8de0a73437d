//! Model configuration and the parameter layout shared by every module.

use crate::diff::{LstmCell, ParamId, ParamStore, Tensor, WnLinear, WnWeight};
use crate::episodes::{Label, RatingScale, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    /// Two weight-normalized layers with leaky-ReLU activations.
    Mlp { input_dim: usize },
    /// One trainable row per item id.
    Lookup { num_ids: usize },
    /// Two 5×5 stride-2 convolutions, one 3×3 convolution, then a dense map.
    Conv { side: usize, filters: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    Classes(usize),
    Ratings(RatingScale),
}

impl LabelSpace {
    pub fn for_task(spec: &TaskSpec) -> Self {
        match &spec.task {
            TaskKind::Classification(c) => LabelSpace::Classes(c.num_classes),
            TaskKind::Ratings(r) => LabelSpace::Ratings(r.scale),
        }
    }

    /// Width of the label part of the read input.
    pub fn read_width(&self) -> usize {
        match self {
            LabelSpace::Classes(n) => *n,
            LabelSpace::Ratings(_) => 1,
        }
    }

    /// Width of a prediction row: class distribution or a single rating.
    pub fn pred_width(&self) -> usize {
        self.read_width()
    }

    pub fn check(&self, label: &Label) -> Result<()> {
        match (self, label) {
            (LabelSpace::Classes(n), Label::Class(c)) if c < n => Ok(()),
            (LabelSpace::Ratings(s), Label::Rating(r)) if s.contains(*r) => Ok(()),
            _ => Err(Error::contract(format!("label {label:?} outside {self:?}"))),
        }
    }

    /// Read-module encoding: one-hot class or rating mapped to `[-1, 1]`.
    pub fn read_encoding(&self, label: &Label) -> Result<Vec<f64>> {
        self.check(label)?;
        Ok(match (self, label) {
            (LabelSpace::Classes(n), Label::Class(c)) => one_hot(*c, *n),
            (LabelSpace::Ratings(s), Label::Rating(r)) => vec![s.to_unit(*r)],
            _ => unreachable!(),
        })
    }

    /// Prediction-target encoding: one-hot class or the raw rating.
    pub fn target_encoding(&self, label: &Label) -> Result<Vec<f64>> {
        self.check(label)?;
        Ok(match label {
            Label::Class(c) => one_hot(*c, self.pred_width()),
            Label::Rating(r) => vec![*r],
        })
    }

    pub fn target_rows(&self, labels: &[Label]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(labels.len() * self.pred_width());
        for l in labels {
            data.extend(self.target_encoding(l)?);
        }
        Ok(Tensor::matrix(labels.len(), self.pred_width(), data))
    }
}

fn one_hot(c: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[c] = 1.0;
    v
}

/// Dimensions are not given by the method description; 64 is the default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder: EncoderConfig,
    pub labels: LabelSpace,
    pub matching_steps: usize,
    pub layer_norm: bool,
    /// Learned positive scale on slow-prediction cosines (starts at 1).
    pub slow_sharpen: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn for_task(spec: &TaskSpec, embed_dim: usize, hidden_dim: usize) -> Self {
        let encoder = match &spec.task {
            TaskKind::Classification(c) => EncoderConfig::Mlp {
                input_dim: c.feature_dim,
            },
            TaskKind::Ratings(r) => EncoderConfig::Lookup { num_ids: r.num_movies },
        };
        Self {
            embed_dim,
            hidden_dim,
            encoder,
            labels: LabelSpace::for_task(spec),
            matching_steps: 3,
            layer_norm: true,
            slow_sharpen: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embed_dim and hidden_dim must be positive".into()));
        }
        if self.matching_steps == 0 {
            return Err(Error::Config("matching_steps must be at least 1".into()));
        }
        match self.labels {
            LabelSpace::Classes(n) if n < 2 => return Err(Error::Config("need at least 2 classes".into())),
            _ => {}
        }
        match self.encoder {
            EncoderConfig::Mlp { input_dim: 0 } | EncoderConfig::Lookup { num_ids: 0 } => {
                Err(Error::Config("encoder input size must be positive".into()))
            }
            EncoderConfig::Conv { side, filters } if side < 8 || filters == 0 => {
                Err(Error::Config("conv encoder needs side ≥ 8 and filters > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Whether this model can run episodes of `spec`.
    pub fn compatible_with(&self, spec: &TaskSpec) -> Result<()> {
        let want = LabelSpace::for_task(spec);
        let ok = match (&self.labels, &want) {
            (LabelSpace::Classes(a), LabelSpace::Classes(b)) => a == b,
            (LabelSpace::Ratings(_), LabelSpace::Ratings(_)) => true,
            _ => false,
        };
        let enc_ok = match (&self.encoder, &spec.task) {
            (EncoderConfig::Mlp { input_dim }, TaskKind::Classification(c)) => *input_dim == c.feature_dim,
            (EncoderConfig::Conv { .. }, TaskKind::Classification(_)) => true,
            (EncoderConfig::Lookup { num_ids }, TaskKind::Ratings(r)) => *num_ids >= r.num_movies,
            _ => false,
        };
        if ok && enc_ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "model ({:?}, {:?}) is incompatible with task {:?}",
                self.labels, self.encoder, spec.task
            )))
        }
    }
}

/// Test-time switches for ablation studies; none of them change parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// Force the fast-prediction sharpening score γ to 1.
    pub fixed_gamma: bool,
    /// Skip the bidirectional pass: x″ = x′ and the backward state is zero.
    pub no_context: bool,
    /// Override the number of matching steps.
    pub matching_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderParams {
    Mlp {
        l1: WnLinear,
        l2: WnLinear,
    },
    Lookup {
        table: ParamId,
    },
    Conv {
        convs: [(WnWeight, ParamId); 3],
        fc: WnLinear,
        side: usize,
        filters: usize,
    },
}

/// Handles to every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub encoder: EncoderParams,
    pub ctx_fwd: LstmCell,
    pub ctx_bwd: LstmCell,
    pub w_e: WnLinear,
    pub h0: WnLinear,
    pub read: WnLinear,
    pub controller: LstmCell,
    pub w_b: WnLinear,
    pub w_g: WnLinear,
    pub w_p: ParamId,
    pub w_gamma: WnLinear,
    pub value: WnLinear,
    pub matcher: LstmCell,
    pub w_m: WnLinear,
    pub slow_log_scale: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
}

/// Number of item-item similarity features per candidate.
pub const SIM_FEATURES: usize = 6;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let (d, h) = (config.embed_dim, config.hidden_dim);
        let rng = &mut rng;
        let encoder = match config.encoder {
            EncoderConfig::Mlp { input_dim } => EncoderParams::Mlp {
                l1: WnLinear::new(&mut p, "enc.l1", input_dim, d, rng),
                l2: WnLinear::new(&mut p, "enc.l2", d, d, rng),
            },
            EncoderConfig::Lookup { num_ids } => EncoderParams::Lookup {
                table: p.add("enc.table", Tensor::randn(&[num_ids, d], 0.05, rng)),
            },
            EncoderConfig::Conv { side, filters } => {
                let mut conv = |name: &str, cin: usize, k: usize| {
                    let w = WnWeight::new(&mut p, name, cin * k * k, filters, rng);
                    let b = p.add(format!("{name}.b"), Tensor::zeros(&[1, filters]));
                    (w, b)
                };
                let convs = [
                    conv("enc.conv1", 1, 5),
                    conv("enc.conv2", filters, 5),
                    conv("enc.conv3", filters, 3),
                ];
                let s = conv_out_side(side);
                let fc = WnLinear::new(&mut p, "enc.fc", filters * s * s, d, rng);
                EncoderParams::Conv {
                    convs,
                    fc,
                    side,
                    filters,
                }
            }
        };
        let ctx_fwd = LstmCell::new(&mut p, "ctx.fwd", d, h, false, rng);
        let ctx_bwd = LstmCell::new(&mut p, "ctx.bwd", d + h, h, false, rng);
        let w_e = WnLinear::new(&mut p, "ctx.w_e", 2 * h, d, rng);
        let h0 = WnLinear::new(&mut p, "ctl.h0", h, h, rng);
        let read = WnLinear::new(&mut p, "read", d + config.labels.read_width(), h, rng);
        let controller = LstmCell::new(&mut p, "ctl.lstm", h, h, config.layer_norm, rng);
        let w_b = WnLinear::new(&mut p, "sel.w_b", h, d, rng);
        let w_g = WnLinear::new(&mut p, "sel.w_g", h, d + SIM_FEATURES, rng);
        let w_p = p.add("sel.w_p", Tensor::zeros(&[1, d + SIM_FEATURES]));
        let w_gamma = WnLinear::new(&mut p, "fast.w_gamma", h, d, rng);
        let value = WnLinear::new(&mut p, "value", h, 1, rng);
        let matcher = LstmCell::new(&mut p, "slow.lstm", 2 * d + h, h, config.layer_norm, rng);
        let w_m = WnLinear::new(&mut p, "slow.w_m", h, d, rng);
        let slow_log_scale = config
            .slow_sharpen
            .then(|| p.add("slow.log_scale", Tensor::scalar(0.0)));
        let layout = Layout {
            encoder,
            ctx_fwd,
            ctx_bwd,
            w_e,
            h0,
            read,
            controller,
            w_b,
            w_g,
            w_p,
            w_gamma,
            value,
            matcher,
            w_m,
            slow_log_scale,
        };
        Ok(Self {
            config,
            params: p,
            layout,
        })
    }

    /// Rebuilds the layout for `config` and installs `params` by name.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (_, name, t) in params.iter() {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.set(id, t.clone());
        }
        Ok(model)
    }

    /// Replaces lookup-table rows with pretrained vectors (padded or cut to d).
    pub fn load_item_vectors(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        let EncoderParams::Lookup { table } = self.layout.encoder else {
            return Err(Error::Config("pretrained vectors need a lookup encoder".into()));
        };
        let d = self.config.embed_dim;
        let t = self.params.get_mut(table);
        if rows.len() > t.rows() {
            return Err(Error::Config(format!(
                "{} vectors for a {}-row table",
                rows.len(),
                t.rows()
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            for k in 0..d {
                t.data_mut()[i * d + k] = r.get(k).copied().unwrap_or(0.0);
            }
        }
        Ok(())
    }

    pub fn matching_steps(&self, ablation: &Ablation) -> usize {
        ablation.matching_steps.unwrap_or(self.config.matching_steps)
    }
}

pub(crate) fn conv_out_side(side: usize) -> usize {
    let s1 = (side + 4 - 5) / 2 + 1;
    (s1 + 4 - 5) / 2 + 1
}
