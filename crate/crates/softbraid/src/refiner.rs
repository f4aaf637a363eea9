//! Iterative multi-agent trajectory refinement.
//!
//! A scene's candidate futures (K modes × N agents) are embedded once,
//! then refined over I iterations. Each iteration extracts the braid
//! topology of the *current* trajectories, runs trajectory-trajectory
//! attention followed by trajectory-lane attention steered by that
//! topology, and adds a predicted agent-local offset to every trajectory.
//! Selections (closest-approach times, neighborhood membership, lane
//! vertices) are made from forward values; the feature arithmetic that
//! consumes them is built on the tape, so training gradients flow through
//! the topology features of every iteration after the first.

use serde::{Deserialize, Serialize};

use crate::archive::ParameterArchive;
use crate::autodiff::{ensure_finite, Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{derivative_stencil, LocalFrame, Trajectory, Vec2};
use crate::nn::{
    layer_norm, mhca, mlp3, LayerNormParams, LayerNormVars, LinearParams, LinearVars, MhcaParams,
    MhcaVars, Mlp3Params, Mlp3Vars,
};
use crate::scenario::{ModeSet, Scenario};
use crate::seeds;
use crate::topology::{
    braid_crossing, soft_intersection_tl, soft_intersection_tt, ZERO_DISTANCE_EPS_M,
};

/// Width of one directed trajectory-trajectory topology record.
pub const TT_FEATURE_DIM: usize = 10;
/// Width of one trajectory-lane topology record.
pub const TL_FEATURE_DIM: usize = 6;
/// Base spatial frequency of the sinusoidal coordinate lift, rad/m;
/// band b uses `2^b` times this.
pub const PE_BASE_FREQ: f64 = 1.0 / 16.0;

/// How neighborhoods and attention keys are derived from the scene.
///
/// `SoftBraid` is the full model: distance-gated neighborhoods with
/// closest-approach feature records added to the keys. `Braid` gates
/// agent neighborhoods on hard crossing instead and drops the record
/// features. `None` keeps the distance gating but zeroes every topology
/// record, leaving plain embedding keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyMode {
    SoftBraid,
    Braid,
    None,
}

impl std::fmt::Display for TopologyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TopologyMode::SoftBraid => "soft_braid",
            TopologyMode::Braid => "braid",
            TopologyMode::None => "none",
        })
    }
}

impl std::str::FromStr for TopologyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_braid" => Ok(TopologyMode::SoftBraid),
            "braid" => Ok(TopologyMode::Braid),
            "none" => Ok(TopologyMode::None),
            other => Err(Error::config(format!(
                "unknown topology mode {other:?} (expected soft_braid, braid, or none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    /// Refinement iterations I.
    pub iterations: usize,
    /// Agent-agent neighborhood radius, meters.
    pub tau_a: f64,
    /// Agent-lane neighborhood radius, meters.
    pub tau_l: f64,
    /// Embedding width D.
    pub embed_dim: usize,
    /// Attention heads H; must divide D.
    pub heads: usize,
    pub topology_mode: TopologyMode,
    /// Recompute topology from each iteration's output. When off, the
    /// topology and its feature records stay frozen at the initial
    /// trajectories for every iteration.
    pub topology_update: bool,
    /// Lane centerline vertices subsampled into each lane key, P.
    pub lane_points_per_key: usize,
    /// Sinusoidal frequency bands per future coordinate; 0 feeds the raw
    /// coordinates to the encoder.
    pub pe_bands: usize,
    /// Layer-norm residual form for the attention blocks. Off reproduces
    /// the bare attention equations.
    pub residual_norm: bool,
    /// Crossing threshold for `topology_mode = braid`, meters.
    pub braid_epsilon: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            iterations: 3,
            tau_a: 50.0,
            tau_l: 10.0,
            embed_dim: 64,
            heads: 8,
            topology_mode: TopologyMode::SoftBraid,
            topology_update: true,
            lane_points_per_key: 10,
            pe_bands: 4,
            residual_norm: true,
            braid_epsilon: 2.0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if !(self.tau_a.is_finite() && self.tau_a > 0.0) {
            return Err(Error::config(format!(
                "tau_a must be a positive finite distance, got {}",
                self.tau_a
            )));
        }
        if !(self.tau_l.is_finite() && self.tau_l > 0.0) {
            return Err(Error::config(format!(
                "tau_l must be a positive finite distance, got {}",
                self.tau_l
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must divide evenly into {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.lane_points_per_key == 0 {
            return Err(Error::config("lane_points_per_key must be positive"));
        }
        if !(self.braid_epsilon.is_finite() && self.braid_epsilon > 0.0) {
            return Err(Error::config(format!(
                "braid_epsilon must be a positive finite distance, got {}",
                self.braid_epsilon
            )));
        }
        Ok(())
    }

    /// Encoder input width for a future horizon: centered origin (2),
    /// heading (1), and the lifted local future coordinates.
    pub fn enc_input_dim(&self, t_plus: usize) -> usize {
        let per_scalar = if self.pe_bands == 0 { 1 } else { 2 * self.pe_bands };
        3 + 2 * t_plus * per_scalar
    }

    /// Lane key width: subsampled local polyline plus the topology record.
    pub fn lane_key_dim(&self) -> usize {
        2 * self.lane_points_per_key + TL_FEATURE_DIM
    }
}

/// One attention stage: the cross-attention projections plus the layer
/// norm applied to the stacked keys under the residual form.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlockParams {
    pub mhca: MhcaParams,
    pub ln_kv: LayerNormParams,
}

impl AttnBlockParams {
    fn validate(&self, d: usize) -> Result<()> {
        let square = |l: &LinearParams| l.w.rows() == d && l.w.cols() == d && l.b.cols() == d;
        let m = &self.mhca;
        if !(square(&m.wq) && square(&m.wk) && square(&m.wv) && square(&m.wo)) {
            return Err(Error::shape(
                "attention projections must be square in the embedding width",
            ));
        }
        if m.ln.gamma.cols() != d
            || m.ln.beta.cols() != d
            || self.ln_kv.gamma.cols() != d
            || self.ln_kv.beta.cols() != d
        {
            return Err(Error::shape(
                "attention layer norms must match the embedding width",
            ));
        }
        if m.heads == 0 || d % m.heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {d} must divide evenly into {} heads",
                m.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
pub struct AttnBlockVars {
    pub mhca: MhcaVars,
    pub ln_kv: LayerNormVars,
}

/// The full trainable parameter set. Entry order is canonical: encoder,
/// the two record encoders, the two attention stages, then the head;
/// archives, optimizer state, and gradient orderings all follow it.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams {
    pub enc: Mlp3Params,
    pub phi_tt: Mlp3Params,
    pub phi_tl: Mlp3Params,
    pub tt: AttnBlockParams,
    pub tl: AttnBlockParams,
    pub head: Mlp3Params,
}

/// Number of named tensors in the canonical parameter ordering.
pub const PARAM_ENTRY_COUNT: usize = 48;

fn mlp_entries<'a>(prefix: &str, m: &'a Mlp3Params, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.l1.w"), &m.l1.w));
    out.push((format!("{prefix}.l1.b"), &m.l1.b));
    out.push((format!("{prefix}.l2.w"), &m.l2.w));
    out.push((format!("{prefix}.l2.b"), &m.l2.b));
    out.push((format!("{prefix}.l3.w"), &m.l3.w));
    out.push((format!("{prefix}.l3.b"), &m.l3.b));
}

fn take_lin(it: &mut impl Iterator<Item = Tensor>) -> LinearParams {
    LinearParams {
        w: it.next().expect("length checked"),
        b: it.next().expect("length checked"),
    }
}

fn take_mlp(it: &mut impl Iterator<Item = Tensor>) -> Mlp3Params {
    Mlp3Params {
        l1: take_lin(it),
        l2: take_lin(it),
        l3: take_lin(it),
    }
}

fn take_attn(it: &mut impl Iterator<Item = Tensor>, heads: usize) -> AttnBlockParams {
    let pair = |it: &mut dyn Iterator<Item = Tensor>| {
        (
            it.next().expect("length checked"),
            it.next().expect("length checked"),
        )
    };
    let wq = take_lin(it);
    let wk = take_lin(it);
    let wv = take_lin(it);
    let wo = take_lin(it);
    let (g, b) = pair(it);
    let (g2, b2) = pair(it);
    AttnBlockParams {
        mhca: MhcaParams {
            heads,
            wq,
            wk,
            wv,
            wo,
            ln: LayerNormParams { gamma: g, beta: b },
        },
        ln_kv: LayerNormParams {
            gamma: g2,
            beta: b2,
        },
    }
}

fn attn_entries<'a>(prefix: &str, a: &'a AttnBlockParams, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.attn.wq"), &a.mhca.wq.w));
    out.push((format!("{prefix}.attn.bq"), &a.mhca.wq.b));
    out.push((format!("{prefix}.attn.wk"), &a.mhca.wk.w));
    out.push((format!("{prefix}.attn.bk"), &a.mhca.wk.b));
    out.push((format!("{prefix}.attn.wv"), &a.mhca.wv.w));
    out.push((format!("{prefix}.attn.bv"), &a.mhca.wv.b));
    out.push((format!("{prefix}.attn.wo"), &a.mhca.wo.w));
    out.push((format!("{prefix}.attn.bo"), &a.mhca.wo.b));
    out.push((format!("{prefix}.attn.ln.g"), &a.mhca.ln.gamma));
    out.push((format!("{prefix}.attn.ln.b"), &a.mhca.ln.beta));
    out.push((format!("{prefix}.ln_kv.g"), &a.ln_kv.gamma));
    out.push((format!("{prefix}.ln_kv.b"), &a.ln_kv.beta));
}

impl RefinerParams {
    /// Seeded random initialization sized for the config and horizon.
    /// Weights draw in canonical entry order so a seed pins every tensor.
    pub fn init(cfg: &RefinerConfig, t_plus: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if t_plus < 2 {
            return Err(Error::invalid(
                "refiner parameters need a future horizon of at least 2 samples",
            ));
        }
        let mut rng = seeds::rng(seed);
        let d = cfg.embed_dim;
        let enc = Mlp3Params::init(&mut rng, cfg.enc_input_dim(t_plus), d, d);
        let phi_tt = Mlp3Params::init(&mut rng, TT_FEATURE_DIM, d, d);
        let phi_tl = Mlp3Params::init(&mut rng, cfg.lane_key_dim(), d, d);
        let tt = AttnBlockParams {
            mhca: MhcaParams::init(&mut rng, d, cfg.heads)?,
            ln_kv: LayerNormParams::init(d),
        };
        let tl = AttnBlockParams {
            mhca: MhcaParams::init(&mut rng, d, cfg.heads)?,
            ln_kv: LayerNormParams::init(d),
        };
        let head = Mlp3Params::init(&mut rng, d, d, 2 * t_plus);
        Ok(RefinerParams {
            enc,
            phi_tt,
            phi_tl,
            tt,
            tl,
            head,
        })
    }

    /// Zeroes the offset head, making every refinement iteration an exact
    /// identity on the trajectories.
    pub fn zero_head(&mut self) {
        let input = self.head.l1.w.rows();
        let hidden = self.head.l1.w.cols();
        let output = self.head.l3.w.cols();
        self.head = Mlp3Params {
            l1: LinearParams::zeros(input, hidden),
            l2: LinearParams::zeros(hidden, hidden),
            l3: LinearParams::zeros(hidden, output),
        };
    }

    pub fn embed_dim(&self) -> usize {
        self.enc.output_dim()
    }

    pub fn heads(&self) -> usize {
        self.tt.mhca.heads
    }

    /// Named tensors in canonical order.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(PARAM_ENTRY_COUNT);
        mlp_entries("enc", &self.enc, &mut out);
        mlp_entries("phi_tt", &self.phi_tt, &mut out);
        mlp_entries("phi_tl", &self.phi_tl, &mut out);
        attn_entries("tt", &self.tt, &mut out);
        attn_entries("tl", &self.tl, &mut out);
        mlp_entries("head", &self.head, &mut out);
        debug_assert_eq!(out.len(), PARAM_ENTRY_COUNT);
        out
    }

    /// Tensor clones in canonical order, for binding and gradient checks.
    pub fn ordered_tensors(&self) -> Vec<Tensor> {
        self.entries().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn to_archive(&self, step: u64) -> ParameterArchive {
        let mut archive = ParameterArchive::new(step);
        for (name, tensor) in self.entries() {
            archive.push(name, tensor.clone());
        }
        archive
    }

    /// Rebuilds parameters from an archive, ignoring any `opt.*` entries
    /// an optimizer may have stored alongside them.
    pub fn from_archive(archive: &ParameterArchive, heads: usize) -> Result<Self> {
        let fetch = |name: String| -> Result<Tensor> {
            archive.get(&name).cloned().ok_or_else(|| {
                Error::invalid(format!("checkpoint is missing parameter entry {name}"))
            })
        };
        let lin = |p: String| -> Result<LinearParams> {
            Ok(LinearParams {
                w: fetch(format!("{p}.w"))?,
                b: fetch(format!("{p}.b"))?,
            })
        };
        let mlp = |p: &str| -> Result<Mlp3Params> {
            Ok(Mlp3Params {
                l1: lin(format!("{p}.l1"))?,
                l2: lin(format!("{p}.l2"))?,
                l3: lin(format!("{p}.l3"))?,
            })
        };
        let attn = |p: &str| -> Result<AttnBlockParams> {
            Ok(AttnBlockParams {
                mhca: MhcaParams {
                    heads,
                    wq: LinearParams {
                        w: fetch(format!("{p}.attn.wq"))?,
                        b: fetch(format!("{p}.attn.bq"))?,
                    },
                    wk: LinearParams {
                        w: fetch(format!("{p}.attn.wk"))?,
                        b: fetch(format!("{p}.attn.bk"))?,
                    },
                    wv: LinearParams {
                        w: fetch(format!("{p}.attn.wv"))?,
                        b: fetch(format!("{p}.attn.bv"))?,
                    },
                    wo: LinearParams {
                        w: fetch(format!("{p}.attn.wo"))?,
                        b: fetch(format!("{p}.attn.bo"))?,
                    },
                    ln: LayerNormParams {
                        gamma: fetch(format!("{p}.attn.ln.g"))?,
                        beta: fetch(format!("{p}.attn.ln.b"))?,
                    },
                },
                ln_kv: LayerNormParams {
                    gamma: fetch(format!("{p}.ln_kv.g"))?,
                    beta: fetch(format!("{p}.ln_kv.b"))?,
                },
            })
        };
        let params = RefinerParams {
            enc: mlp("enc")?,
            phi_tt: mlp("phi_tt")?,
            phi_tl: mlp("phi_tl")?,
            tt: attn("tt")?,
            tl: attn("tl")?,
            head: mlp("head")?,
        };
        params.validate()?;
        Ok(params)
    }

    /// Internal consistency: every block chains and shares one embedding
    /// width.
    pub fn validate(&self) -> Result<()> {
        self.enc.validate()?;
        self.phi_tt.validate()?;
        self.phi_tl.validate()?;
        self.head.validate()?;
        let d = self.enc.output_dim();
        if self.phi_tt.input_dim() != TT_FEATURE_DIM {
            return Err(Error::shape(format!(
                "trajectory record encoder expects width {TT_FEATURE_DIM}, got {}",
                self.phi_tt.input_dim()
            )));
        }
        if self.phi_tt.output_dim() != d || self.phi_tl.output_dim() != d {
            return Err(Error::shape(
                "record encoders must produce the embedding width",
            ));
        }
        if self.head.input_dim() != d {
            return Err(Error::shape("offset head must consume the embedding width"));
        }
        if self.head.output_dim() % 2 != 0 {
            return Err(Error::shape(
                "offset head must produce an even number of outputs (x, y per step)",
            ));
        }
        self.tt.validate(d)?;
        self.tl.validate(d)?;
        if self.tt.mhca.heads != self.tl.mhca.heads {
            return Err(Error::config(
                "both attention stages must use the same head count",
            ));
        }
        Ok(())
    }

    /// Consistency against a config and a concrete horizon.
    pub fn validate_for(&self, cfg: &RefinerConfig, t_plus: usize) -> Result<()> {
        self.validate()?;
        let d = self.embed_dim();
        if d != cfg.embed_dim {
            return Err(Error::config(format!(
                "parameters carry embedding width {d}, config asks for {}",
                cfg.embed_dim
            )));
        }
        if self.heads() != cfg.heads {
            return Err(Error::config(format!(
                "parameters carry {} attention heads, config asks for {}",
                self.heads(),
                cfg.heads
            )));
        }
        if self.enc.input_dim() != cfg.enc_input_dim(t_plus) {
            return Err(Error::shape(format!(
                "encoder expects {} inputs, scene with horizon {t_plus} provides {}",
                self.enc.input_dim(),
                cfg.enc_input_dim(t_plus)
            )));
        }
        if self.phi_tl.input_dim() != cfg.lane_key_dim() {
            return Err(Error::shape(format!(
                "lane key encoder expects {} inputs, config produces {}",
                self.phi_tl.input_dim(),
                cfg.lane_key_dim()
            )));
        }
        if self.head.output_dim() != 2 * t_plus {
            return Err(Error::shape(format!(
                "offset head produces {} outputs, horizon {t_plus} needs {}",
                self.head.output_dim(),
                2 * t_plus
            )));
        }
        Ok(())
    }

    /// Binds every tensor onto the tape in canonical order; `trainable`
    /// selects parameter nodes over constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> RefinerVars {
        self.bind_ordered(tape, trainable).0
    }

    /// [`bind`](Self::bind) that also hands back the leaf vars in
    /// canonical order, so callers can pull gradients per entry.
    pub fn bind_ordered(&self, tape: &mut Tape, trainable: bool) -> (RefinerVars, Vec<Var>) {
        let vars: Vec<Var> = self
            .ordered_tensors()
            .into_iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        (RefinerVars::from_ordered(&vars, self.heads()), vars)
    }

    /// Rebuilds the block structure from tensors laid out in canonical
    /// entry order. Inverse of [`ordered_tensors`](Self::ordered_tensors).
    pub fn from_ordered_tensors(tensors: Vec<Tensor>, heads: usize) -> Result<Self> {
        if tensors.len() != PARAM_ENTRY_COUNT {
            return Err(Error::shape(format!(
                "canonical ordering holds {PARAM_ENTRY_COUNT} tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let enc = take_mlp(&mut it);
        let phi_tt = take_mlp(&mut it);
        let phi_tl = take_mlp(&mut it);
        let tt = take_attn(&mut it, heads);
        let tl = take_attn(&mut it, heads);
        let head = take_mlp(&mut it);
        let params = RefinerParams {
            enc,
            phi_tt,
            phi_tl,
            tt,
            tl,
            head,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Clone, Copy)]
pub struct RefinerVars {
    pub enc: Mlp3Vars,
    pub phi_tt: Mlp3Vars,
    pub phi_tl: Mlp3Vars,
    pub tt: AttnBlockVars,
    pub tl: AttnBlockVars,
    pub head: Mlp3Vars,
}

impl RefinerVars {
    /// Reassembles the block structure from vars laid out in canonical
    /// entry order. Inverse of [`RefinerParams::ordered_tensors`].
    pub fn from_ordered(v: &[Var], heads: usize) -> RefinerVars {
        assert_eq!(v.len(), PARAM_ENTRY_COUNT, "canonical ordering holds 48 tensors");
        let mlp = |o: usize| Mlp3Vars {
            l1: LinearVars { w: v[o], b: v[o + 1] },
            l2: LinearVars { w: v[o + 2], b: v[o + 3] },
            l3: LinearVars { w: v[o + 4], b: v[o + 5] },
        };
        let attn = |o: usize| AttnBlockVars {
            mhca: MhcaVars {
                heads,
                wq: LinearVars { w: v[o], b: v[o + 1] },
                wk: LinearVars { w: v[o + 2], b: v[o + 3] },
                wv: LinearVars { w: v[o + 4], b: v[o + 5] },
                wo: LinearVars { w: v[o + 6], b: v[o + 7] },
                ln: LayerNormVars {
                    gamma: v[o + 8],
                    beta: v[o + 9],
                },
            },
            ln_kv: LayerNormVars {
                gamma: v[o + 10],
                beta: v[o + 11],
            },
        };
        RefinerVars {
            enc: mlp(0),
            phi_tt: mlp(6),
            phi_tl: mlp(12),
            tt: attn(18),
            tl: attn(30),
            head: mlp(42),
        }
    }
}

/// Immutable per-scene precomputation: agent frames, scene centering,
/// the derivative stencil, rotation matrices, and local lane key
/// polylines. Lane neighborhoods are measured against full centerlines;
/// only the key content is subsampled.
pub struct SceneContext {
    n: usize,
    t_plus: usize,
    sample_rate: f64,
    frames: Vec<LocalFrame>,
    centered_origins: Vec<Vec2>,
    lanes: Vec<Vec<Vec2>>,
    lane_keys_local: Vec<Vec<Vec<f64>>>,
    stencil: Tensor,
    rot_to_local: Vec<Tensor>,
    rot_from_local: Vec<Tensor>,
}

fn subsample_indices(len: usize, p: usize) -> Vec<usize> {
    debug_assert!(len >= 1 && p >= 1);
    if p == 1 {
        return vec![0];
    }
    (0..p)
        .map(|j| ((j * (len - 1)) as f64 / (p - 1) as f64).round() as usize)
        .collect()
}

impl SceneContext {
    pub fn new(scn: &Scenario, cfg: &RefinerConfig) -> Result<Self> {
        cfg.validate()?;
        scn.validate()?;
        if scn.t_plus < 2 {
            return Err(Error::invalid(
                "refinement needs a future horizon of at least 2 samples for the derivative stencil",
            ));
        }
        let n = scn.n();
        let mut frames = Vec::with_capacity(n);
        for i in 0..n {
            frames.push(LocalFrame::from_history(&scn.history_traj(i)?)?);
        }
        let mean = frames.iter().fold(Vec2::ZERO, |acc, f| acc + f.origin) * (1.0 / n as f64);
        let centered_origins = frames.iter().map(|f| f.origin - mean).collect();
        let lanes: Vec<Vec<Vec2>> = scn.lanes.iter().map(|l| l.centerline.clone()).collect();
        let p = cfg.lane_points_per_key;
        let lane_keys_local = frames
            .iter()
            .map(|f| {
                lanes
                    .iter()
                    .map(|lane| {
                        let mut row = Vec::with_capacity(2 * p);
                        for idx in subsample_indices(lane.len(), p) {
                            let q = f.to_local(lane[idx]);
                            row.push(q.x);
                            row.push(q.y);
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        let stencil = Tensor::from_vec(
            scn.t_plus,
            scn.t_plus,
            derivative_stencil(scn.t_plus, scn.sample_rate),
        );
        let mut rot_to_local = Vec::with_capacity(n);
        let mut rot_from_local = Vec::with_capacity(n);
        for f in &frames {
            let (s, c) = f.heading.sin_cos();
            rot_to_local.push(Tensor::from_vec(2, 2, vec![c, -s, s, c]));
            rot_from_local.push(Tensor::from_vec(2, 2, vec![c, s, -s, c]));
        }
        Ok(SceneContext {
            n,
            t_plus: scn.t_plus,
            sample_rate: scn.sample_rate,
            frames,
            centered_origins,
            lanes,
            lane_keys_local,
            stencil,
            rot_to_local,
            rot_from_local,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t_plus(&self) -> usize {
        self.t_plus
    }

    pub fn frames(&self) -> &[LocalFrame] {
        &self.frames
    }
}

/// Closest-approach record of an agent pair; `i < j` and the distance is
/// the same-time minimum over the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtPick {
    pub i: usize,
    pub j: usize,
    pub t: usize,
    pub distance: f64,
}

/// Closest-approach record of an agent against one lane centerline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TlPick {
    pub lane: usize,
    pub t: usize,
    pub vertex: Vec2,
    pub distance: f64,
}

/// The topology of one mode's trajectories: neighbor sets, the pair
/// records behind them, and per-agent lane records. Neighbor lists are
/// ascending, which fixes the attention key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTopology {
    pub omega_a: Vec<Vec<usize>>,
    pub pairs: Vec<TtPick>,
    pub omega_l: Vec<Vec<usize>>,
    pub lane_picks: Vec<Vec<TlPick>>,
}

fn compute_mode_topology(
    points: &[Vec<Vec2>],
    ctx: &SceneContext,
    cfg: &RefinerConfig,
) -> Result<ModeTopology> {
    let n = points.len();
    let mut trajs = Vec::with_capacity(n);
    for pts in points {
        trajs.push(Trajectory::new(pts.clone(), ctx.sample_rate)?);
    }

    let mut pick_t = vec![vec![0usize; n]; n];
    let mut pick_d = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let si = soft_intersection_tt(&trajs[i], &trajs[j])?;
            pick_t[i][j] = si.time_index;
            pick_t[j][i] = si.time_index;
            pick_d[i][j] = si.distance;
            pick_d[j][i] = si.distance;
        }
    }

    let member = |i: usize, j: usize, cross: &[Vec<bool>]| match cfg.topology_mode {
        TopologyMode::SoftBraid | TopologyMode::None => pick_d[i][j] <= cfg.tau_a,
        TopologyMode::Braid => cross[i][j],
    };
    let mut cross = vec![vec![false; n]; n];
    if cfg.topology_mode == TopologyMode::Braid {
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = braid_crossing(&trajs[i], &trajs[j], cfg.braid_epsilon)?;
                let m = a || b;
                cross[i][j] = m;
                cross[j][i] = m;
            }
        }
    }
    let omega_a: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && member(i, j, &cross)).collect())
        .collect();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if member(i, j, &cross) {
                pairs.push(TtPick {
                    i,
                    j,
                    t: pick_t[i][j],
                    distance: pick_d[i][j],
                });
            }
        }
    }

    let mut omega_l = vec![Vec::new(); n];
    let mut lane_picks = vec![Vec::new(); n];
    for i in 0..n {
        for (li, lane) in ctx.lanes.iter().enumerate() {
            let si = soft_intersection_tl(&trajs[i], lane)?;
            if si.distance <= cfg.tau_l {
                omega_l[i].push(li);
                lane_picks[i].push(TlPick {
                    lane: li,
                    t: si.time_index,
                    vertex: si.p_other,
                    distance: si.distance,
                });
            }
        }
    }

    Ok(ModeTopology {
        omega_a,
        pairs,
        omega_l,
        lane_picks,
    })
}

/// Per-mode topology of the given trajectories, as the refiner would see
/// them. Useful for inspecting scenes without running the network.
pub fn topology_snapshot(
    scn: &Scenario,
    modes: &ModeSet,
    cfg: &RefinerConfig,
) -> Result<Vec<ModeTopology>> {
    modes.validate_against(scn)?;
    let ctx = SceneContext::new(scn, cfg)?;
    modes
        .modes
        .iter()
        .map(|mode| compute_mode_topology(mode, &ctx, cfg))
        .collect()
}

/// Tape-wide constants shared by every iteration.
struct TapeCtx {
    stencil: Var,
    rot_to: Vec<Var>,
    rot_from: Vec<Var>,
    empty_keys: Var,
}

impl TapeCtx {
    fn new(tape: &mut Tape, ctx: &SceneContext, d: usize) -> TapeCtx {
        TapeCtx {
            stencil: tape.constant(ctx.stencil.clone()),
            rot_to: ctx
                .rot_to_local
                .iter()
                .map(|m| tape.constant(m.clone()))
                .collect(),
            rot_from: ctx
                .rot_from_local
                .iter()
                .map(|m| tape.constant(m.clone()))
                .collect(),
            empty_keys: tape.constant(Tensor::zeros(0, d)),
        }
    }
}

/// Distance and receiver-local bearing of a 1×2 tape offset. The caller
/// supplies the forward-value distance: exact coincidence falls back to
/// constant zeros, where the bearing is undefined and the norm gradient
/// would blow up.
fn polar(tape: &mut Tape, delta: Var, distance_value: f64, heading: f64) -> (Var, Var) {
    if distance_value < ZERO_DISTANCE_EPS_M {
        let z = tape.constant(Tensor::zeros(1, 1));
        return (z, z);
    }
    let d = tape.norm(delta);
    let dx = tape.slice_cols(delta, 0, 1);
    let dy = tape.slice_cols(delta, 1, 1);
    let th = tape.atan2(dy, dx);
    let shifted = tape.add_scalar(th, -heading);
    (d, tape.wrap_angle(shifted))
}

type VaPair = Option<(Var, Var)>;

/// Both directed records of one agent pair at its closest-approach time,
/// each in the receiving agent's frame. The second direction negates the
/// shared bearing after localizing it, mirroring the value-path records.
fn tt_pair_rows(
    tape: &mut Tape,
    tc: &TapeCtx,
    ctx: &SceneContext,
    pick: &TtPick,
    y_k: &[Var],
    va_k: &[VaPair],
) -> (Var, Var) {
    let (i, j, t) = (pick.i, pick.j, pick.t);
    let pi = tape.gather_row(y_k[i], t);
    let pj = tape.gather_row(y_k[j], t);
    let delta = tape.sub(pj, pi);
    let (d_var, th_i, th_j) = if pick.distance < ZERO_DISTANCE_EPS_M {
        let z = tape.constant(Tensor::zeros(1, 1));
        (z, z, z)
    } else {
        let d = tape.norm(delta);
        let dx = tape.slice_cols(delta, 0, 1);
        let dy = tape.slice_cols(delta, 1, 1);
        let th_g = tape.atan2(dy, dx);
        let si = tape.add_scalar(th_g, -ctx.frames[i].heading);
        let th_i = tape.wrap_angle(si);
        let sj = tape.add_scalar(th_g, -ctx.frames[j].heading);
        let wj = tape.wrap_angle(sj);
        (d, th_i, tape.neg(wj))
    };
    let (vi, ai) = va_k[i].expect("kinematics built for every agent in record mode");
    let (vj, aj) = va_k[j].expect("kinematics built for every agent in record mode");
    let vi_t = tape.gather_row(vi, t);
    let vj_t = tape.gather_row(vj, t);
    let ai_t = tape.gather_row(ai, t);
    let aj_t = tape.gather_row(aj, t);

    let mut receiver_row = |r: usize, v_self: Var, v_other: Var, a_self: Var, a_other: Var, th: Var| {
        let vs = tape.matmul(v_self, tc.rot_to[r], false);
        let vo = tape.matmul(v_other, tc.rot_to[r], false);
        let as_ = tape.matmul(a_self, tc.rot_to[r], false);
        let ao = tape.matmul(a_other, tc.rot_to[r], false);
        tape.concat(&[vs, vo, as_, ao, d_var, th], Axis::Cols)
    };
    let row_i = receiver_row(i, vi_t, vj_t, ai_t, aj_t, th_i);
    let row_j = receiver_row(j, vj_t, vi_t, aj_t, ai_t, th_j);
    (row_i, row_j)
}

/// The 6-wide motion/relation record of an agent against one lane pick,
/// in the agent's frame.
fn tl_lambda(
    tape: &mut Tape,
    tc: &TapeCtx,
    ctx: &SceneContext,
    i: usize,
    pick: &TlPick,
    y_ki: Var,
    va_ki: VaPair,
) -> Var {
    let (v, a) = va_ki.expect("kinematics built for every agent in record mode");
    let v_t = tape.gather_row(v, pick.t);
    let a_t = tape.gather_row(a, pick.t);
    let v_loc = tape.matmul(v_t, tc.rot_to[i], false);
    let a_loc = tape.matmul(a_t, tc.rot_to[i], false);
    let pi = tape.gather_row(y_ki, pick.t);
    let vert = tape.constant(Tensor::from_vec(1, 2, vec![pick.vertex.x, pick.vertex.y]));
    let delta = tape.sub(vert, pi);
    let (d, th) = polar(tape, delta, pick.distance, ctx.frames[i].heading);
    tape.concat(&[v_loc, a_loc, d, th], Axis::Cols)
}

/// One iteration's attention inputs: per (mode, agent) the neighbor list
/// with its encoded pair record (absent outside soft-braid mode), and the
/// stacked encoded lane keys.
#[derive(Clone)]
struct IterFeatures {
    tt: Vec<Vec<Vec<(usize, Option<Var>)>>>,
    tl: Vec<Vec<Option<Var>>>,
}

fn build_iteration_features(
    tape: &mut Tape,
    vars: &RefinerVars,
    tc: &TapeCtx,
    ctx: &SceneContext,
    cfg: &RefinerConfig,
    y: &[Vec<Var>],
    topos: &[ModeTopology],
) -> IterFeatures {
    let kk = y.len();
    let n = ctx.n;
    let soft = cfg.topology_mode == TopologyMode::SoftBraid;

    let va: Vec<Vec<VaPair>> = if soft {
        y.iter()
            .map(|mode| {
                mode.iter()
                    .map(|yi| {
                        let v = tape.matmul(tc.stencil, *yi, false);
                        let a = tape.matmul(tc.stencil, v, false);
                        Some((v, a))
                    })
                    .collect()
            })
            .collect()
    } else {
        vec![vec![None; n]; kk]
    };

    let tt = if soft {
        let mut grids: Vec<Vec<Vec<Option<Var>>>> = Vec::with_capacity(kk);
        for k in 0..kk {
            let mut grid = vec![vec![None; n]; n];
            for pick in &topos[k].pairs {
                let (ri, rj) = tt_pair_rows(tape, tc, ctx, pick, &y[k], &va[k]);
                grid[pick.i][pick.j] = Some(ri);
                grid[pick.j][pick.i] = Some(rj);
            }
            grids.push(grid);
        }
        let mut flat = Vec::new();
        for k in 0..kk {
            for i in 0..n {
                for &j in &topos[k].omega_a[i] {
                    flat.push(grids[k][i][j].expect("pair records cover the neighbor sets"));
                }
            }
        }
        if flat.is_empty() {
            (0..kk)
                .map(|k| (0..n).map(|i| debug_empty(&topos[k].omega_a[i])).collect())
                .collect()
        } else {
            let batch = tape.concat(&flat, Axis::Rows);
            let phi = mlp3(tape, &vars.phi_tt, batch);
            let mut cursor = 0usize;
            (0..kk)
                .map(|k| {
                    (0..n)
                        .map(|i| {
                            topos[k].omega_a[i]
                                .iter()
                                .map(|&j| {
                                    let g = tape.gather_row(phi, cursor);
                                    cursor += 1;
                                    (j, Some(g))
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }
    } else {
        (0..kk)
            .map(|k| {
                (0..n)
                    .map(|i| topos[k].omega_a[i].iter().map(|&j| (j, None)).collect())
                    .collect()
            })
            .collect()
    };

    let zero_lambda = tape.constant(Tensor::zeros(1, TL_FEATURE_DIM));
    let mut lane_rows = Vec::new();
    for k in 0..kk {
        for i in 0..n {
            for pick in &topos[k].lane_picks[i] {
                let poly = tape.constant(Tensor::from_vec(
                    1,
                    2 * cfg.lane_points_per_key,
                    ctx.lane_keys_local[i][pick.lane].clone(),
                ));
                let lambda = if soft {
                    tl_lambda(tape, tc, ctx, i, pick, y[k][i], va[k][i])
                } else {
                    zero_lambda
                };
                lane_rows.push(tape.concat(&[poly, lambda], Axis::Cols));
            }
        }
    }
    let tl = if lane_rows.is_empty() {
        vec![vec![None; n]; kk]
    } else {
        let batch = tape.concat(&lane_rows, Axis::Rows);
        let phi = mlp3(tape, &vars.phi_tl, batch);
        let mut cursor = 0usize;
        (0..kk)
            .map(|k| {
                (0..n)
                    .map(|i| {
                        let m = topos[k].lane_picks[i].len();
                        if m == 0 {
                            return None;
                        }
                        let rows: Vec<Var> = (0..m)
                            .map(|_| {
                                let g = tape.gather_row(phi, cursor);
                                cursor += 1;
                                g
                            })
                            .collect();
                        let stacked = tape.concat(&rows, Axis::Rows);
                        Some(if cfg.residual_norm {
                            layer_norm(tape, vars.tl.ln_kv, stacked)
                        } else {
                            stacked
                        })
                    })
                    .collect()
            })
            .collect()
    };

    IterFeatures { tt, tl }
}

/// Neighbor sets must be empty when no record rows exist; keeps the
/// cursor bookkeeping honest in the all-isolated case.
fn debug_empty(omega: &[usize]) -> Vec<(usize, Option<Var>)> {
    debug_assert!(omega.is_empty());
    Vec::new()
}

/// One attention-plus-offset pass over every (mode, agent). Returns the
/// new embeddings and trajectories. Shared verbatim by the full unrolled
/// build and the stepping API so the two stay bit-identical.
fn run_iteration(
    tape: &mut Tape,
    vars: &RefinerVars,
    tc: &TapeCtx,
    ctx: &SceneContext,
    cfg: &RefinerConfig,
    f: &[Vec<Var>],
    y: &[Vec<Var>],
    feats: &IterFeatures,
) -> (Vec<Vec<Var>>, Vec<Vec<Var>>) {
    let kk = f.len();
    let n = ctx.n;
    let mut f_new: Vec<Vec<Var>> = Vec::with_capacity(kk);
    for k in 0..kk {
        let mut row = Vec::with_capacity(n);
        for i in 0..n {
            let query = f[k][i];
            let list = &feats.tt[k][i];
            let f_mid = if list.is_empty() {
                mhca(tape, &vars.tt.mhca, query, tc.empty_keys, tc.empty_keys, cfg.residual_norm)
            } else {
                let rows: Vec<Var> = list
                    .iter()
                    .map(|(j, phi)| match phi {
                        Some(p) => tape.add(f[k][*j], *p),
                        None => f[k][*j],
                    })
                    .collect();
                let stacked = tape.concat(&rows, Axis::Rows);
                let keys = if cfg.residual_norm {
                    layer_norm(tape, vars.tt.ln_kv, stacked)
                } else {
                    stacked
                };
                mhca(tape, &vars.tt.mhca, query, keys, keys, cfg.residual_norm)
            };
            let out = match feats.tl[k][i] {
                Some(keys) => mhca(tape, &vars.tl.mhca, f_mid, keys, keys, cfg.residual_norm),
                None => {
                    mhca(tape, &vars.tl.mhca, f_mid, tc.empty_keys, tc.empty_keys, cfg.residual_norm)
                }
            };
            row.push(out);
        }
        f_new.push(row);
    }

    let flat: Vec<Var> = f_new.iter().flatten().copied().collect();
    let stack = tape.concat(&flat, Axis::Rows);
    let offsets = mlp3(tape, &vars.head, stack);
    let mut y_new = Vec::with_capacity(kk);
    for k in 0..kk {
        let mut row = Vec::with_capacity(n);
        for i in 0..n {
            let o = tape.gather_row(offsets, k * n + i);
            let o = tape.reshape(o, ctx.t_plus, 2);
            let o_global = tape.matmul(o, tc.rot_from[i], false);
            row.push(tape.add(o_global, y[k][i]));
        }
        y_new.push(row);
    }
    (f_new, y_new)
}

fn points_tensor(points: &[Vec2]) -> Tensor {
    Tensor::from_vec(
        points.len(),
        2,
        points.iter().flat_map(|p| [p.x, p.y]).collect(),
    )
}

fn tensor_points(t: &Tensor) -> Vec<Vec2> {
    (0..t.rows()).map(|r| Vec2::new(t.get(r, 0), t.get(r, 1))).collect()
}

fn mode_points(tape: &Tape, y_k: &[Var]) -> Vec<Vec<Vec2>> {
    y_k.iter().map(|v| tensor_points(tape.value(*v))).collect()
}

/// Sinusoidal lift of the agent-local future coordinates, prefixed with
/// the centered origin and heading. One row per (mode, agent); computed
/// off the tape since the initial trajectories are inputs, not
/// parameters.
fn encoder_inputs(ctx: &SceneContext, y0: &ModeSet, cfg: &RefinerConfig) -> Tensor {
    let kk = y0.k();
    let n = ctx.n;
    let width = cfg.enc_input_dim(ctx.t_plus);
    let mut data = Vec::with_capacity(kk * n * width);
    for mode in &y0.modes {
        for (i, future) in mode.iter().enumerate() {
            let frame = &ctx.frames[i];
            data.push(ctx.centered_origins[i].x);
            data.push(ctx.centered_origins[i].y);
            data.push(frame.heading);
            for p in future {
                let q = frame.to_local(*p);
                for s in [q.x, q.y] {
                    if cfg.pe_bands == 0 {
                        data.push(s);
                    } else {
                        for b in 0..cfg.pe_bands {
                            let w = (1u64 << b) as f64 * PE_BASE_FREQ;
                            data.push((w * s).sin());
                            data.push((w * s).cos());
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(kk * n, width, data)
}

/// Initial embeddings of a candidate set, one row per (mode, agent) in
/// mode-major order.
#[derive(Clone, Debug)]
pub struct SceneEmbedding {
    pub k: usize,
    pub n: usize,
    pub dim: usize,
    /// (K·N)×D; row k·N + i belongs to (mode k, agent i).
    pub rows: Tensor,
}

pub fn encode_initial(
    params: &RefinerParams,
    scn: &Scenario,
    y0: &ModeSet,
    cfg: &RefinerConfig,
) -> Result<SceneEmbedding> {
    params.validate_for(cfg, scn.t_plus)?;
    y0.validate_against(scn)?;
    let ctx = SceneContext::new(scn, cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let inputs = tape.constant(encoder_inputs(&ctx, y0, cfg));
    let rows = mlp3(&mut tape, &vars.enc, inputs);
    Ok(SceneEmbedding {
        k: y0.k(),
        n: ctx.n,
        dim: cfg.embed_dim,
        rows: tape.value(rows).clone(),
    })
}

/// The fully unrolled refinement graph on a caller-supplied tape. The
/// initial trajectories enter as constants; parameter nodes come from
/// `vars`, so binding them trainable turns the same graph into the
/// training objective's forward pass.
pub struct TapeRefine {
    /// Initial trajectory constants, `[mode][agent]`, each T₊×2.
    pub y0: Vec<Vec<Var>>,
    /// Initial embeddings, `[mode][agent]`, each 1×D.
    pub f0: Vec<Vec<Var>>,
    /// Refined trajectories after each iteration, `[iter][mode][agent]`.
    pub y_iters: Vec<Vec<Vec<Var>>>,
    /// Embeddings after each iteration, `[iter][mode][agent]`.
    pub f_iters: Vec<Vec<Vec<Var>>>,
    /// Topology consumed by each iteration, `[iter][mode]`.
    pub topologies: Vec<Vec<ModeTopology>>,
}

pub fn build_refine_tape(
    tape: &mut Tape,
    vars: &RefinerVars,
    ctx: &SceneContext,
    y0: &ModeSet,
    cfg: &RefinerConfig,
) -> Result<TapeRefine> {
    let kk = y0.k();
    if y0.n() != ctx.n || y0.t_plus() != ctx.t_plus {
        return Err(Error::shape(format!(
            "candidate set is {}×{} over {} steps, scene context expects {} agents over {} steps",
            kk,
            y0.n(),
            y0.t_plus(),
            ctx.n,
            ctx.t_plus
        )));
    }
    let n = ctx.n;
    let tc = TapeCtx::new(tape, ctx, cfg.embed_dim);

    let inputs = tape.constant(encoder_inputs(ctx, y0, cfg));
    let f_batch = mlp3(tape, &vars.enc, inputs);
    let mut f: Vec<Vec<Var>> = (0..kk)
        .map(|k| (0..n).map(|i| tape.gather_row(f_batch, k * n + i)).collect())
        .collect();
    let f0 = f.clone();
    let mut y: Vec<Vec<Var>> = y0
        .modes
        .iter()
        .map(|mode| mode.iter().map(|pts| tape.constant(points_tensor(pts))).collect())
        .collect();
    let y0_vars = y.clone();

    let mut y_iters = Vec::with_capacity(cfg.iterations);
    let mut f_iters = Vec::with_capacity(cfg.iterations);
    let mut topologies = Vec::with_capacity(cfg.iterations);
    let mut frozen: Option<(Vec<ModeTopology>, IterFeatures)> = None;

    for _ in 0..cfg.iterations {
        let (topos, feats) = match &frozen {
            Some((t, ft)) if !cfg.topology_update => (t.clone(), ft.clone()),
            _ => {
                let mut topos = Vec::with_capacity(kk);
                for mode in &y {
                    topos.push(compute_mode_topology(&mode_points(tape, mode), ctx, cfg)?);
                }
                let feats = build_iteration_features(tape, vars, &tc, ctx, cfg, &y, &topos);
                if !cfg.topology_update {
                    frozen = Some((topos.clone(), feats.clone()));
                }
                (topos, feats)
            }
        };
        let (f_new, y_new) = run_iteration(tape, vars, &tc, ctx, cfg, &f, &y, &feats);
        f = f_new;
        y = y_new;
        f_iters.push(f.clone());
        y_iters.push(y.clone());
        topologies.push(topos);
    }

    Ok(TapeRefine {
        y0: y0_vars,
        f0,
        y_iters,
        f_iters,
        topologies,
    })
}

/// All I refined candidate sets plus the topology each iteration consumed.
#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub iterations: Vec<ModeSet>,
    pub topologies: Vec<Vec<ModeTopology>>,
}

impl RefineOutput {
    pub fn final_modes(&self) -> &ModeSet {
        self.iterations.last().expect("at least one iteration")
    }
}

/// Runs the full refinement pipeline at inference settings.
pub fn refine(
    params: &RefinerParams,
    scn: &Scenario,
    y0: &ModeSet,
    cfg: &RefinerConfig,
) -> Result<RefineOutput> {
    params.validate_for(cfg, scn.t_plus)?;
    y0.validate_against(scn)?;
    let ctx = SceneContext::new(scn, cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let tr = build_refine_tape(&mut tape, &vars, &ctx, y0, cfg)?;
    let mut iterations = Vec::with_capacity(tr.y_iters.len());
    for mode_vars in &tr.y_iters {
        let mut modes = Vec::with_capacity(mode_vars.len());
        for agents in mode_vars {
            let mut mode = Vec::with_capacity(agents.len());
            for v in agents {
                let t = tape.value(*v);
                ensure_finite(t, "refined trajectory", 0)?;
                mode.push(tensor_points(t));
            }
            modes.push(mode);
        }
        iterations.push(ModeSet { modes });
    }
    Ok(RefineOutput {
        iterations,
        topologies: tr.topologies,
    })
}

/// Embeddings and trajectories between stepping calls. `y0` keeps the
/// original candidates so frozen-topology stepping can rebuild its
/// records from them; `topo0` holds the frozen topology once computed.
#[derive(Clone, Debug)]
pub struct RefinerState {
    /// (K·N)×D embedding rows, mode-major.
    pub f: Tensor,
    pub y: ModeSet,
    pub y0: ModeSet,
    pub topo0: Option<Vec<ModeTopology>>,
}

pub fn initial_state(
    params: &RefinerParams,
    scn: &Scenario,
    y0: &ModeSet,
    cfg: &RefinerConfig,
) -> Result<RefinerState> {
    let emb = encode_initial(params, scn, y0, cfg)?;
    Ok(RefinerState {
        f: emb.rows,
        y: y0.clone(),
        y0: y0.clone(),
        topo0: None,
    })
}

/// Advances the refinement by one iteration. Chaining I calls from
/// [`initial_state`] reproduces [`refine`] with I iterations exactly,
/// because both paths share one iteration builder.
pub fn refine_once(
    params: &RefinerParams,
    scn: &Scenario,
    state: &RefinerState,
    cfg: &RefinerConfig,
) -> Result<(RefinerState, Vec<ModeTopology>)> {
    params.validate_for(cfg, scn.t_plus)?;
    state.y.validate_against(scn)?;
    let ctx = SceneContext::new(scn, cfg)?;
    let kk = state.y.k();
    let n = ctx.n;
    let d = cfg.embed_dim;
    if state.f.rows() != kk * n || state.f.cols() != d {
        return Err(Error::shape(format!(
            "state embeddings are {}×{}, expected {}×{d}",
            state.f.rows(),
            state.f.cols(),
            kk * n
        )));
    }

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let tc = TapeCtx::new(&mut tape, &ctx, d);
    let f_const = tape.constant(state.f.clone());
    let f: Vec<Vec<Var>> = (0..kk)
        .map(|k| (0..n).map(|i| tape.gather_row(f_const, k * n + i)).collect())
        .collect();
    let y: Vec<Vec<Var>> = state
        .y
        .modes
        .iter()
        .map(|mode| mode.iter().map(|pts| tape.constant(points_tensor(pts))).collect())
        .collect();

    let (topos, feats, next_topo0) = if cfg.topology_update {
        let mut topos = Vec::with_capacity(kk);
        for mode in &state.y.modes {
            topos.push(compute_mode_topology(mode, &ctx, cfg)?);
        }
        let feats = build_iteration_features(&mut tape, &vars, &tc, &ctx, cfg, &y, &topos);
        (topos, feats, None)
    } else {
        let topos = match &state.topo0 {
            Some(t) => t.clone(),
            None => {
                let mut topos = Vec::with_capacity(kk);
                for mode in &state.y0.modes {
                    topos.push(compute_mode_topology(mode, &ctx, cfg)?);
                }
                topos
            }
        };
        let y0_vars: Vec<Vec<Var>> = state
            .y0
            .modes
            .iter()
            .map(|mode| mode.iter().map(|pts| tape.constant(points_tensor(pts))).collect())
            .collect();
        let feats = build_iteration_features(&mut tape, &vars, &tc, &ctx, cfg, &y0_vars, &topos);
        (topos.clone(), feats, Some(topos))
    };

    let (f_new, y_new) = run_iteration(&mut tape, &vars, &tc, &ctx, cfg, &f, &y, &feats);

    let mut f_rows = Vec::with_capacity(kk * n * d);
    for mode in &f_new {
        for v in mode {
            let t = tape.value(*v);
            ensure_finite(t, "refined embedding", 0)?;
            f_rows.extend_from_slice(t.data());
        }
    }
    let mut modes = Vec::with_capacity(kk);
    for mode in &y_new {
        let mut out = Vec::with_capacity(n);
        for v in mode {
            let t = tape.value(*v);
            ensure_finite(t, "refined trajectory", 0)?;
            out.push(tensor_points(t));
        }
        modes.push(out);
    }
    Ok((
        RefinerState {
            f: Tensor::from_vec(kk * n, d, f_rows),
            y: ModeSet { modes },
            y0: state.y0.clone(),
            topo0: next_topo0,
        },
        topos,
    ))
}
