//! Input-space attacks: the bounded-distribution attack, the pixel-bounded
//! iterative baseline, and the clipping and two-step baselines.

mod baselines;
mod bim;
mod d2b;
mod search;

pub use baselines::{clipping_attack, two_step_attack, ClipConfig, TwoStepConfig};
pub use bim::{bim_attack, BimConfig};
pub use d2b::d2b_attack;
pub use search::{binary_search_step, calibrate_epsilon, run_batch, search_step, StepSearch};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::bounds::{resolve_bounds, BoundKind, BoundSpec};
use crate::error::{Error, Result};
use crate::loss::{normalized_deviation, Goal, LossWeights};
use crate::model::Model;
use crate::plane::Plane;
use crate::profile::PlaneProfile;
use crate::tensor::Tensor;

/// How the attack goal is derived from a sample's true label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Untargeted,
    Targeted { target: usize },
    /// Target `(label + offset) % classes`.
    TargetedOffset { offset: usize },
}

impl Mode {
    pub fn goal(self, label: usize, classes: usize) -> Result<Goal> {
        let target = match self {
            Mode::Untargeted => return Ok(Goal::Untargeted { label }),
            Mode::Targeted { target } => target,
            Mode::TargetedOffset { offset } => (label + offset) % classes,
        };
        if target >= classes {
            return Err(Error::Config(format!("target {target} out of range for {classes} classes")));
        }
        Ok(Goal::Targeted { target })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Untargeted => f.write_str("untargeted"),
            Mode::Targeted { target } => write!(f, "targeted:{target}"),
            Mode::TargetedOffset { offset } => write!(f, "targeted+{offset}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// `untargeted`, `targeted:<label>` or `targeted+<offset>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("bad mode {s:?} (expected untargeted, targeted:<label> or targeted+<offset>)"));
        if s == "untargeted" {
            Ok(Mode::Untargeted)
        } else if let Some(t) = s.strip_prefix("targeted:") {
            Ok(Mode::Targeted { target: t.parse().map_err(|_| bad())? })
        } else if let Some(o) = s.strip_prefix("targeted+") {
            Ok(Mode::TargetedOffset { offset: o.parse().map_err(|_| bad())? })
        } else {
            Err(bad())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierKind {
    Polynomial,
    Linear,
}

impl FromStr for BarrierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poly" | "polynomial" => Ok(BarrierKind::Polynomial),
            "linear" => Ok(BarrierKind::Linear),
            other => Err(Error::Usage(format!("unknown barrier {other:?} (expected poly or linear)"))),
        }
    }
}

/// One bounded plane of the reference model.
#[derive(Debug, Clone, Copy)]
pub struct ThrottlePlane<'a> {
    pub plane: &'a Plane,
    pub profile: &'a PlaneProfile,
    pub kind: BoundKind,
    pub eps: f64,
}

/// The reference model and its bounded planes.
#[derive(Debug, Clone)]
pub struct Throttle<'a> {
    pub reference: &'a Model,
    pub planes: Vec<ThrottlePlane<'a>>,
}

/// Bounds of every throttle plane at one natural input.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub bounds: Vec<BoundSpec>,
    /// `C(y_nat)` per neuron, per plane.
    pub cdf_nat: Vec<Vec<f64>>,
}

/// Bound measurements of an input against resolved bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    pub feasible: bool,
    /// Largest normalised deviation over all planes.
    pub occupancy: f64,
    /// Per-plane `max |C(y) - C(y_nat)|`.
    pub quantile_distances: Vec<f64>,
}

impl<'a> Throttle<'a> {
    pub fn new(reference: &'a Model, planes: Vec<ThrottlePlane<'a>>) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::Config("at least one throttle plane is required".into()));
        }
        for tp in &planes {
            if tp.plane.id != tp.profile.plane || tp.plane.neuron_count != tp.profile.neuron_count() {
                return Err(Error::Usage(format!("profile for plane {} does not match plane {}", tp.profile.plane, tp.plane.name)));
            }
            if tp.plane.nodes.iter().any(|&n| n >= reference.graph.nodes().len()) {
                return Err(Error::Usage(format!("plane {} is not part of the reference model", tp.plane.name)));
            }
        }
        Ok(Throttle { reference, planes })
    }

    pub fn resolve_from(&self, acts: &[Tensor]) -> Result<Resolved> {
        let mut bounds = Vec::with_capacity(self.planes.len());
        let mut cdf_nat = Vec::with_capacity(self.planes.len());
        for tp in &self.planes {
            let y = tp.plane.gather(acts);
            bounds.push(resolve_bounds(tp.profile, &y, tp.kind, tp.eps)?);
            cdf_nat.push(tp.profile.dists.iter().zip(&y).map(|(d, &v)| d.cdf(v)).collect());
        }
        Ok(Resolved { bounds, cdf_nat })
    }

    pub fn resolve(&self, x_nat: &Tensor) -> Result<Resolved> {
        let (_, tape) = self.reference.graph.forward(x_nat)?;
        self.resolve_from(tape.activations())
    }

    pub fn measure_from(&self, resolved: &Resolved, acts: &[Tensor]) -> Measure {
        let mut m = Measure { feasible: true, occupancy: 0.0, quantile_distances: Vec::new() };
        for ((tp, spec), cnat) in self.planes.iter().zip(&resolved.bounds).zip(&resolved.cdf_nat) {
            let y = tp.plane.gather(acts);
            m.feasible &= spec.feasible(&y);
            for (iv, &v) in spec.intervals.iter().zip(&y) {
                if !iv.excluded {
                    m.occupancy = m.occupancy.max(normalized_deviation(v, iv));
                }
            }
            let qd = tp.profile.dists.iter().zip(&y).zip(cnat).map(|((d, &v), c)| (d.cdf(v) - c).abs()).fold(0.0, f64::max);
            m.quantile_distances.push(qd);
        }
        m
    }

    /// Measures `x` on the unmodified reference model.
    pub fn measure(&self, resolved: &Resolved, x: &Tensor) -> Result<Measure> {
        let (_, tape) = self.reference.graph.forward(x)?;
        Ok(self.measure_from(resolved, tape.activations()))
    }
}

/// Per-attack binary search for the sign-step size: the largest step in
/// `[lo, hi]` whose `probe_iters`-iteration run stays in bounds throughout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub lo: f64,
    pub hi: f64,
    pub probes: usize,
    pub probe_iters: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { lo: 0.0, hi: 0.01, probes: 20, probe_iters: 25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    pub barrier: BarrierKind,
    pub max_iters: usize,
    /// Stop after this many iterations without a confidence improvement.
    pub patience: usize,
    /// Sign-step size in pixel units, used as is when `search` is `None`.
    pub step: f64,
    pub search: Option<SearchConfig>,
    pub max_recoveries: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: Mode::Untargeted,
            weights: LossWeights::default(),
            barrier: BarrierKind::Polynomial,
            max_iters: 1000,
            patience: 50,
            step: 1.0 / 255.0,
            search: None,
            max_recoveries: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub confidence: f64,
    pub pred_loss: f64,
    pub barrier_loss: f64,
    pub smooth_loss: f64,
    pub step: f64,
    pub feasible: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub success: bool,
    pub confidence: f64,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    /// All throttle-plane values inside their bounds on the unmodified model.
    pub feasible: bool,
    pub occupancy: f64,
    pub quantile_distances: Vec<f64>,
    /// Final step size.
    pub step: f64,
    /// The step search found no feasible step, not even `lo`.
    pub step_warning: bool,
    pub recoveries: usize,
    /// The values seen during optimisation are those of the original model.
    pub consistent: bool,
    /// More recoveries than allowed; `x_adv` is the last feasible iterate.
    pub aborted: bool,
}

impl AttackResult {
    /// `iteration,confidence,pred_loss,barrier_loss,smooth_loss,step,feasible,success`
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["iteration", "confidence", "pred_loss", "barrier_loss", "smooth_loss", "step", "feasible", "success"])?;
        for t in &self.trace {
            wtr.write_record([
                t.iteration.to_string(),
                format!("{}", t.confidence),
                format!("{}", t.pred_loss),
                format!("{}", t.barrier_loss),
                format!("{}", t.smooth_loss),
                format!("{}", t.step),
                (t.feasible as u8).to_string(),
                (t.success as u8).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `clamp(x - step * sign(g), 0, 1)`; zero gradient entries stay put.
pub(crate) fn sign_step(x: &mut Tensor, g: &Tensor, step: f32) {
    for (v, &d) in x.data_mut().iter_mut().zip(g.data()) {
        if d > 0.0 {
            *v = (*v - step).clamp(0.0, 1.0);
        } else if d < 0.0 {
            *v = (*v + step).clamp(0.0, 1.0);
        }
    }
}

pub(crate) fn check_input(x: &Tensor) -> Result<()> {
    if x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Config("input pixels must lie in [0, 1]".into()))
    }
}
