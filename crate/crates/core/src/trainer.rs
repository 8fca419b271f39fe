//! Alternating optimization: label network, then rounds of W-steps and
//! B-steps for both image networks.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bstep::{bstep_sweep, BStepWorkspace, CodeMatrix, Owner};
use crate::codes::{pack, PackedCodes};
use crate::data::{validate_dataset, Dataset, HyperParams, SimilarityMatrix};
use crate::encoder::{read_layers, write_layers, EncoderParams};
use crate::imgnet::{imgnet_objective, ImgNet};
use crate::labelnet::{train_labelnet, ClassifierHead, LabelNet, LabelSupervision, LossBreakdown};
use crate::{AdsqError, Result};

/// Training mode. `Symmetric` uses one network for both code halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    #[serde(alias = "no-asym")]
    NoAsym,
    #[serde(alias = "no-sem")]
    NoSem,
    #[serde(alias = "no-both")]
    NoBoth,
    #[serde(alias = "sym")]
    Symmetric,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoAsym, Variant::NoSem, Variant::NoBoth, Variant::Symmetric];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAsym => "no_asym",
            Variant::NoSem => "no_sem",
            Variant::NoBoth => "no_both",
            Variant::Symmetric => "symmetric",
        }
    }

    pub fn shares_params(self) -> bool {
        self == Variant::Symmetric
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = AdsqError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no_asym" | "no-asym" => Variant::NoAsym,
            "no_sem" | "no-sem" => Variant::NoSem,
            "no_both" | "no-both" => Variant::NoBoth,
            "symmetric" | "sym" => Variant::Symmetric,
            other => return Err(AdsqError::Config(format!("unknown variant {other:?}"))),
        })
    }
}

/// Multipliers laid over the ImgNet objective by a variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossMask {
    /// Scales `alpha * J1`.
    pub semantic: f64,
    /// Scales the asymmetric term, in both the W-step and the B-step.
    pub asym: f64,
}

pub fn variant_loss_mask(variant: Variant) -> LossMask {
    match variant {
        Variant::Full | Variant::Symmetric => LossMask { semantic: 1.0, asym: 1.0 },
        Variant::NoAsym => LossMask { semantic: 1.0, asym: 0.0 },
        Variant::NoSem => LossMask { semantic: 0.0, asym: 1.0 },
        Variant::NoBoth => LossMask { semantic: 0.0, asym: 0.0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Continue,
    Stop,
}

/// Stops once the relative change between consecutive entries of
/// `history` has stayed below `tol` for the last `patience` rounds.
/// `patience` 0 is treated as 1.
pub fn convergence_check(history: &[f64], tol: f64, patience: usize) -> Convergence {
    let patience = patience.max(1);
    if history.len() < patience + 1 {
        return Convergence::Continue;
    }
    let stable = history.windows(2).rev().take(patience).all(|w| {
        let scale = w[0].abs().max(f64::MIN_POSITIVE);
        (w[1] - w[0]).abs() / scale < tol
    });
    if stable {
        Convergence::Stop
    } else {
        Convergence::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Label,
    WStepX,
    WStepY,
    BStepX,
    BStepY,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Label => "label",
            Phase::WStepX => "wstep_x",
            Phase::WStepY => "wstep_y",
            Phase::BStepX => "bstep_x",
            Phase::BStepY => "bstep_y",
        }
    }
}

/// One training-log row. For W-step and label phases `loss` is the last
/// epoch's summed batch loss; for B-steps it is the full-set ImgNet
/// objective with the updated codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRecord {
    pub round: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub variant: Variant,
    pub label: LabelNet,
    pub imgx: ImgNet,
    pub imgy: ImgNet,
    pub bx: CodeMatrix,
    pub by: CodeMatrix,
    pub supervision: LabelSupervision,
    /// Outer rounds completed.
    pub round: usize,
    pub history: Vec<PhaseRecord>,
    /// Full-set ImgNet objective (x plus y) after each round's B-steps.
    pub objective: Vec<f64>,
    /// Wall-clock seconds per phase, summed over rounds.
    pub timings: Vec<(String, f64)>,
}

const STREAM_LABEL_INIT: u64 = 1;
const STREAM_IMGX_INIT: u64 = 2;
const STREAM_IMGY_INIT: u64 = 3;
const STREAM_LABEL_EPOCHS: u64 = 0x100;
const STREAM_WSTEP_X: u64 = 0x200;
const STREAM_WSTEP_Y: u64 = 0x300;

/// Independent seed for a named random stream (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Layer widths of an image network for `input_dim` features.
pub fn imgnet_dims(input_dim: usize, h: &HyperParams) -> Vec<usize> {
    let mut dims = vec![input_dim];
    dims.extend(&h.encoder_hidden);
    dims.extend([h.semantic_dim, h.k_half]);
    dims
}

/// Randomly initialized image networks for `h.seed`, as used before the
/// first W-step. In symmetric mode both are the x network.
pub fn init_imgnets(input_dim: usize, h: &HyperParams) -> Result<(EncoderParams, EncoderParams)> {
    let dims = imgnet_dims(input_dim, h);
    let x = EncoderParams::init(&dims, derive_seed(h.seed, STREAM_IMGX_INIT))?;
    let y = if h.variant.shares_params() {
        x.clone()
    } else {
        EncoderParams::init(&dims, derive_seed(h.seed, STREAM_IMGY_INIT))?
    };
    Ok((x, y))
}

struct Clock(Vec<(String, f64)>);

impl Clock {
    fn time<T>(&mut self, phase: Phase, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(phase, start.elapsed().as_secs_f64());
        out
    }

    fn add(&mut self, phase: Phase, secs: f64) {
        match self.0.iter_mut().find(|(p, _)| p == phase.name()) {
            Some((_, t)) => *t += secs,
            None => self.0.push((phase.name().to_string(), secs)),
        }
    }
}

fn phase_err(phase: Phase, round: usize) -> impl Fn(AdsqError) -> AdsqError {
    move |e| e.context(format_args!("phase {} round {round}", phase.name()))
}

/// Runs the whole alternating scheme with the variant in `h.variant`.
///
/// Stops after `h.outer_rounds` rounds or earlier once the objective has
/// converged per [`convergence_check`].
pub fn train(dataset: &Dataset, s: &SimilarityMatrix, h: &HyperParams) -> Result<TrainState> {
    let problems = validate_dataset(dataset, h);
    if !problems.is_empty() {
        return Err(AdsqError::Data(problems.join("; ")));
    }
    if s.n() != dataset.n() {
        return Err(AdsqError::Shape(format!("S covers {} items, dataset has {}", s.n(), dataset.n())));
    }
    let variant = h.variant;
    let mask = variant_loss_mask(variant);
    let shared = variant.shares_params();
    let mut clock = Clock(Vec::new());
    let mut history = Vec::new();

    let mut label = LabelNet::new(dataset.classes(), h, derive_seed(h.seed, STREAM_LABEL_INIT))?;
    let (label_hist, mut supervision) = clock
        .time(Phase::Label, || {
            train_labelnet(&mut label, dataset, s, h, h.t_label, h.lr_for_round(0), derive_seed(h.seed, STREAM_LABEL_EPOCHS))
        })
        .map_err(phase_err(Phase::Label, 0))?;
    if let Some(l) = label_hist.last() {
        history.push(PhaseRecord { round: 0, phase: Phase::Label, loss: *l });
    }

    let (x0, y0) = init_imgnets(dataset.dim(), h)?;
    let mut imgx = ImgNet::new(x0, h);
    let mut imgy = ImgNet::new(y0, h);
    let features = dataset.features();
    let mut bx = CodeMatrix::from_sign(imgx.encoder.forward(features)?.u.view(), Owner::X);
    let mut by = CodeMatrix::from_sign(imgy.encoder.forward(features)?.u.view(), Owner::Y);
    let s_signed = s.signed();
    let k = h.k_half as f64;

    let mut objective = Vec::new();
    let mut rounds_done = 0;
    for round in 0..h.outer_rounds {
        let lr = h.lr_for_round(round);
        if round > 0 && h.refresh_labelnet {
            let (hist, sup) = clock
                .time(Phase::Label, || {
                    train_labelnet(&mut label, dataset, s, h, h.t_label, lr, derive_seed(h.seed, STREAM_LABEL_EPOCHS + round as u64))
                })
                .map_err(phase_err(Phase::Label, round))?;
            supervision = sup;
            if let Some(l) = hist.last() {
                history.push(PhaseRecord { round, phase: Phase::Label, loss: *l });
            }
        }

        let run_wstep = |net: &mut ImgNet, b: &CodeMatrix, stream: u64| -> Result<LossBreakdown> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(h.seed, stream + round as u64));
            let mut last = LossBreakdown::default();
            for _ in 0..h.t_img {
                last = net.wstep_epoch(features, s, b, &supervision, h, variant, lr, &mut rng)?;
            }
            Ok(last)
        };
        let start = Instant::now();
        let (lx, ly) = if shared {
            let lx = run_wstep(&mut imgx, &bx, STREAM_WSTEP_X).map_err(phase_err(Phase::WStepX, round))?;
            (lx, None)
        } else {
            // the two networks have disjoint state and their own streams
            let (rx, ry) = std::thread::scope(|scope| {
                let hy = scope.spawn(|| run_wstep(&mut imgy, &by, STREAM_WSTEP_Y));
                let rx = run_wstep(&mut imgx, &bx, STREAM_WSTEP_X);
                (rx, hy.join().expect("W-step thread panicked"))
            });
            let lx = rx.map_err(phase_err(Phase::WStepX, round))?;
            let ly = ry.map_err(phase_err(Phase::WStepY, round))?;
            (lx, Some(ly))
        };
        // both W-steps share one wall-clock entry
        clock.add(Phase::WStepX, start.elapsed().as_secs_f64());
        history.push(PhaseRecord { round, phase: Phase::WStepX, loss: lx });
        if let Some(ly) = ly {
            history.push(PhaseRecord { round, phase: Phase::WStepY, loss: ly });
        }

        let bstep = |net: &ImgNet, b: &mut CodeMatrix, phase: Phase| -> Result<LossBreakdown> {
            let u = net.encoder.forward(features)?.u;
            let ws = BStepWorkspace::new(u, s_signed.clone(), k, h.eta, mask.asym)?;
            bstep_sweep(b, &ws, h.bstep_sweeps, false)?;
            imgnet_objective(&net.encoder, features, s, b, &supervision, h, variant).map_err(phase_err(phase, round))
        };
        let ox = clock.time(Phase::BStepX, || bstep(&imgx, &mut bx, Phase::BStepX)).map_err(phase_err(Phase::BStepX, round))?;
        history.push(PhaseRecord { round, phase: Phase::BStepX, loss: ox });
        let oy = if shared {
            by = CodeMatrix::new(bx.codes().to_owned(), Owner::Y)?;
            ox
        } else {
            let oy = clock.time(Phase::BStepY, || bstep(&imgy, &mut by, Phase::BStepY)).map_err(phase_err(Phase::BStepY, round))?;
            history.push(PhaseRecord { round, phase: Phase::BStepY, loss: oy });
            oy
        };
        if shared {
            imgy.encoder = imgx.encoder.clone();
        }
        objective.push(ox.total + oy.total);
        rounds_done = round + 1;
        if convergence_check(&objective, h.converge_tol, h.converge_patience) == Convergence::Stop {
            break;
        }
    }

    Ok(TrainState {
        variant,
        label,
        imgx,
        imgy,
        bx,
        by,
        supervision,
        round: rounds_done,
        history,
        objective,
        timings: clock.0,
    })
}

/// Training log as CSV with header
/// `round,phase,loss_total,j1,j2,j3,j4,asym`.
pub fn training_log_csv(history: &[PhaseRecord]) -> String {
    let mut out = String::from("round,phase,loss_total,j1,j2,j3,j4,asym\n");
    for r in history {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.round,
            r.phase.name(),
            l.total,
            l.j1,
            l.j2,
            l.j3,
            l.j4,
            l.asym
        ));
    }
    out
}

pub const MODEL_FILES: [&str; 8] =
    ["label.net", "label.head", "imgx.net", "imgy.net", "model.json", "bx.codes", "by.codes", "train_log.csv"];

fn codes_of(b: &CodeMatrix) -> Result<PackedCodes> {
    pack(b.to_i8().view())
}

/// Writes every file of [`MODEL_FILES`] into `dir`, creating it if needed.
pub fn save_model_dir(dir: impl AsRef<Path>, state: &TrainState, h: &HyperParams) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    state.label.encoder.save(dir.join("label.net"))?;
    fs::write(dir.join("label.head"), write_layers(std::slice::from_ref(&state.label.head))?)?;
    state.imgx.encoder.save(dir.join("imgx.net"))?;
    state.imgy.encoder.save(dir.join("imgy.net"))?;
    let meta = serde_json::json!({
        "k_half": h.k_half,
        "k_total": 2 * h.k_half,
        "variant": state.variant,
        "rounds": state.round,
        "imgnet_dims": state.imgx.encoder.dims(),
        "label_dims": state.label.encoder.dims(),
        "config": h,
    });
    let text = serde_json::to_string_pretty(&meta).map_err(|e| AdsqError::Format(e.to_string()))?;
    fs::write(dir.join("model.json"), text + "\n")?;
    codes_of(&state.bx)?.save(dir.join("bx.codes"))?;
    codes_of(&state.by)?.save(dir.join("by.codes"))?;
    fs::write(dir.join("train_log.csv"), training_log_csv(&state.history))?;
    Ok(())
}

/// Loads the two hashing networks from a model directory.
pub fn load_hash_model(dir: impl AsRef<Path>) -> Result<(EncoderParams, EncoderParams)> {
    let dir = dir.as_ref();
    let x = EncoderParams::load(dir.join("imgx.net")).map_err(|e| e.context("imgx.net"))?;
    let y = EncoderParams::load(dir.join("imgy.net")).map_err(|e| e.context("imgy.net"))?;
    if x.dims() != y.dims() {
        return Err(AdsqError::Format(format!("imgx.net has dims {:?} but imgy.net {:?}", x.dims(), y.dims())));
    }
    Ok((x, y))
}

/// Loads the label network and its classifier head.
pub fn load_label_model(dir: impl AsRef<Path>) -> Result<(EncoderParams, ClassifierHead)> {
    let dir = dir.as_ref();
    let enc = EncoderParams::load(dir.join("label.net"))?;
    let mut layers = read_layers(&fs::read(dir.join("label.head"))?)?;
    if layers.len() != 1 {
        return Err(AdsqError::Format(format!("label.head holds {} layers, expected 1", layers.len())));
    }
    Ok((enc, layers.remove(0)))
}

/// The `U` matrices of both networks over `x`, for inspection.
pub fn hash_outputs(state: &TrainState, x: ndarray::ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((state.imgx.encoder.forward(x)?.u, state.imgy.encoder.forward(x)?.u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks() {
        assert_eq!(variant_loss_mask(Variant::Full), LossMask { semantic: 1.0, asym: 1.0 });
        assert_eq!(variant_loss_mask(Variant::Symmetric), LossMask { semantic: 1.0, asym: 1.0 });
        assert_eq!(variant_loss_mask(Variant::NoAsym), LossMask { semantic: 1.0, asym: 0.0 });
        assert_eq!(variant_loss_mask(Variant::NoSem), LossMask { semantic: 0.0, asym: 1.0 });
        assert_eq!(variant_loss_mask(Variant::NoBoth), LossMask { semantic: 0.0, asym: 0.0 });
    }

    #[test]
    fn convergence_examples() {
        assert_eq!(convergence_check(&[100.0, 100.0], 1e-4, 1), Convergence::Stop);
        assert_eq!(convergence_check(&[100.0, 50.0], 1e-4, 1), Convergence::Continue);
        assert_eq!(convergence_check(&[100.0, 99.999], 1e-4, 1), Convergence::Stop);
        assert_eq!(convergence_check(&[100.0], 1e-4, 1), Convergence::Continue);
        assert_eq!(convergence_check(&[100.0, 50.0, 50.0], 1e-4, 2), Convergence::Continue);
        assert_eq!(convergence_check(&[100.0, 50.0, 50.0, 50.0], 1e-4, 2), Convergence::Stop);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let j = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&j).unwrap(), v);
        }
        assert_eq!("sym".parse::<Variant>().unwrap(), Variant::Symmetric);
        assert_eq!("no-both".parse::<Variant>().unwrap(), Variant::NoBoth);
        assert!("half".parse::<Variant>().is_err());
    }

    #[test]
    fn seed_streams_differ() {
        let a = derive_seed(7, STREAM_IMGX_INIT);
        let b = derive_seed(7, STREAM_IMGY_INIT);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, STREAM_IMGX_INIT));
    }

    #[test]
    fn csv_header() {
        assert!(training_log_csv(&[]).starts_with("round,phase,loss_total,j1,j2,j3,j4,asym\n"));
    }
}
