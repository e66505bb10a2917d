//! Training objective: action (MSE + gripper BCE), next-frame image L2 and
//! occupancy position/color losses, combined with fixed weights.
//!
//! Every loss has an analytic gradient with respect to its predictions.
//! Summation is sequential over timesteps and row-major within a frame.

use serde::Serialize;
use thiserror::Error;

pub mod bundle;

/// Gripper probabilities are clamped into `[ε, 1 - ε]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("gripper target {0} is not -1 or +1")]
    GripperTarget(f64),
    #[error("loss weights must be finite and non-negative")]
    InvalidWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub image: f64,
    pub occupancy: f64,
    pub gripper: f64,
    pub rgb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 0.1,
            occupancy: 0.1,
            gripper: 0.01,
            rgb: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if [self.image, self.occupancy, self.gripper, self.rgb]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(LossError::InvalidWeights)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionPrediction {
    pub pose: [f64; 6],
    /// Probability that the gripper is closed.
    pub gripper_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionTarget {
    pub pose: [f64; 6],
    /// Canonical gripper state, `-1` open or `+1` closed.
    pub gripper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActionLoss {
    pub value: f64,
    /// Probabilities that fell outside `(0, 1)` before clamping.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrad {
    pub pose: Vec<[f64; 6]>,
    pub gripper_prob: Vec<f64>,
}

fn bce_target(gripper: f64) -> Result<f64, LossError> {
    if gripper == -1.0 {
        Ok(0.0)
    } else if gripper == 1.0 {
        Ok(1.0)
    } else {
        Err(LossError::GripperTarget(gripper))
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy of probability `p` against label `y ∈ {0, 1}`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn check_actions(pred: &[ActionPrediction], target: &[ActionTarget]) -> Result<(), LossError> {
    if pred.len() != target.len() {
        return Err(LossError::Shape(format!(
            "{} predicted vs {} target actions",
            pred.len(),
            target.len()
        )));
    }
    for (h, (p, t)) in pred.iter().zip(target).enumerate() {
        if !p.pose.iter().chain(&t.pose).all(|v| v.is_finite()) || p.gripper_prob.is_nan() {
            return Err(LossError::NonFinite(format!("action {h}")));
        }
    }
    Ok(())
}

/// `Σ_h [ mean_6 (pose error²) + λ_g · BCE(p_h, y_h) ]`.
pub fn action_loss(
    pred: &[ActionPrediction],
    target: &[ActionTarget],
    gripper_weight: f64,
) -> Result<ActionLoss, LossError> {
    check_actions(pred, target)?;
    let mut value = 0.0;
    let mut clamped = 0;
    for (p, t) in pred.iter().zip(target) {
        let mse = p
            .pose
            .iter()
            .zip(&t.pose)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 6.0;
        if !(p.gripper_prob > 0.0 && p.gripper_prob < 1.0) {
            clamped += 1;
        }
        value += mse + gripper_weight * bce(p.gripper_prob, bce_target(t.gripper)?);
    }
    Ok(ActionLoss { value, clamped })
}

pub fn action_loss_grad(
    pred: &[ActionPrediction],
    target: &[ActionTarget],
    gripper_weight: f64,
) -> Result<ActionGrad, LossError> {
    check_actions(pred, target)?;
    let mut grad = ActionGrad {
        pose: Vec::with_capacity(pred.len()),
        gripper_prob: Vec::with_capacity(pred.len()),
    };
    for (p, t) in pred.iter().zip(target) {
        let mut g = [0.0; 6];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = 2.0 * (p.pose[i] - t.pose[i]) / 6.0;
        }
        grad.pose.push(g);
        let y = bce_target(t.gripper)?;
        let q = p.gripper_prob;
        // Zero where the clamp is active.
        let dp = if q > PROB_EPS && q < 1.0 - PROB_EPS {
            gripper_weight * (-y / q + (1.0 - y) / (1.0 - q))
        } else {
            0.0
        };
        grad.gripper_prob.push(dp);
    }
    Ok(grad)
}

/// Dense image (row-major `H × W × C`, values in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if data.len() != height * width * channels {
            return Err(LossError::Shape(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

fn check_images(pred: &[ImageTensor], target: &[ImageTensor]) -> Result<(), LossError> {
    if pred.len() != target.len() {
        return Err(LossError::Shape(format!(
            "{} predicted vs {} target frames",
            pred.len(),
            target.len()
        )));
    }
    for (h, (p, t)) in pred.iter().zip(target).enumerate() {
        if p.shape() != t.shape() || p.data.len() != t.data.len() {
            return Err(LossError::Shape(format!(
                "frame {h}: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        if let Some(i) = p.data.iter().chain(&t.data).position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(format!("frame {h}, value {i}")));
        }
    }
    Ok(())
}

/// `Σ_h Σ_pixels ‖pred - next_frame‖²`.
pub fn image_loss(pred: &[ImageTensor], next_frames: &[ImageTensor]) -> Result<f64, LossError> {
    check_images(pred, next_frames)?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(next_frames) {
        for (a, b) in p.data.iter().zip(&t.data) {
            total += (a - b) * (a - b);
        }
    }
    Ok(total)
}

pub fn image_loss_grad(
    pred: &[ImageTensor],
    next_frames: &[ImageTensor],
) -> Result<Vec<Vec<f64>>, LossError> {
    check_images(pred, next_frames)?;
    Ok(pred
        .iter()
        .zip(next_frames)
        .map(|(p, t)| p.data.iter().zip(&t.data).map(|(a, b)| 2.0 * (a - b)).collect())
        .collect())
}

/// Dense per-voxel occupancy prediction or target.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyFrame {
    pub occupied: Vec<bool>,
    pub pos: Vec<[f64; 3]>,
    pub rgb: Vec<[f64; 3]>,
}

impl OccupancyFrame {
    /// Target built from a voxelized grid: voxel centers and mean colors.
    pub fn from_grid(grid: &crate::percept::OccupancyGrid, query: &crate::percept::GridQuery) -> Self {
        Self {
            occupied: grid.occupied.clone(),
            pos: query.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            rgb: grid.rgb.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }
}

/// Which voxels the occupancy loss sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoxelSelection {
    /// Cells occupied in the prediction or the target.
    #[default]
    Union,
    TargetOccupied,
    All,
}

impl VoxelSelection {
    fn includes(self, pred: bool, target: bool) -> bool {
        match self {
            VoxelSelection::Union => pred || target,
            VoxelSelection::TargetOccupied => target,
            VoxelSelection::All => true,
        }
    }
}

fn check_occupancy(pred: &[OccupancyFrame], target: &[OccupancyFrame]) -> Result<(), LossError> {
    if pred.len() != target.len() {
        return Err(LossError::Shape(format!(
            "{} predicted vs {} target occupancy frames",
            pred.len(),
            target.len()
        )));
    }
    for (h, (p, t)) in pred.iter().zip(target).enumerate() {
        let n = t.occupied.len();
        if [p.occupied.len(), p.pos.len(), p.rgb.len(), t.pos.len(), t.rgb.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(LossError::Shape(format!("occupancy frame {h}: cell counts differ")));
        }
        let finite = |f: &OccupancyFrame| f.pos.iter().chain(&f.rgb).flatten().all(|v| v.is_finite());
        if !finite(p) || !finite(t) {
            return Err(LossError::NonFinite(format!("occupancy frame {h}")));
        }
    }
    Ok(())
}

/// `Σ_h Σ_cells [ ‖Δpos‖² + λ_rgb ‖Δrgb‖² ]`, cells paired by grid index.
pub fn occupancy_loss(
    pred: &[OccupancyFrame],
    target: &[OccupancyFrame],
    rgb_weight: f64,
    selection: VoxelSelection,
) -> Result<f64, LossError> {
    check_occupancy(pred, target)?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for i in 0..t.len() {
            if !selection.includes(p.occupied[i], t.occupied[i]) {
                continue;
            }
            let mut dpos = 0.0;
            let mut drgb = 0.0;
            for c in 0..3 {
                dpos += (p.pos[i][c] - t.pos[i][c]).powi(2);
                drgb += (p.rgb[i][c] - t.rgb[i][c]).powi(2);
            }
            total += dpos + rgb_weight * drgb;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrad {
    pub pos: Vec<Vec<[f64; 3]>>,
    pub rgb: Vec<Vec<[f64; 3]>>,
}

/// Gradient with the voxel selection held fixed.
pub fn occupancy_loss_grad(
    pred: &[OccupancyFrame],
    target: &[OccupancyFrame],
    rgb_weight: f64,
    selection: VoxelSelection,
) -> Result<OccupancyGrad, LossError> {
    check_occupancy(pred, target)?;
    let mut grad = OccupancyGrad {
        pos: Vec::with_capacity(pred.len()),
        rgb: Vec::with_capacity(pred.len()),
    };
    for (p, t) in pred.iter().zip(target) {
        let mut gp = vec![[0.0; 3]; t.len()];
        let mut gc = vec![[0.0; 3]; t.len()];
        for i in 0..t.len() {
            if selection.includes(p.occupied[i], t.occupied[i]) {
                for c in 0..3 {
                    gp[i][c] = 2.0 * (p.pos[i][c] - t.pos[i][c]);
                    gc[i][c] = 2.0 * rgb_weight * (p.rgb[i][c] - t.rgb[i][c]);
                }
            }
        }
        grad.pos.push(gp);
        grad.rgb.push(gc);
    }
    Ok(grad)
}

/// Predictions and targets for one sample; optional modalities may be absent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionBundle {
    pub actions: Vec<ActionPrediction>,
    pub action_targets: Vec<ActionTarget>,
    pub static_images: Option<(Vec<ImageTensor>, Vec<ImageTensor>)>,
    pub wrist_images: Option<(Vec<ImageTensor>, Vec<ImageTensor>)>,
    pub occupancy: Option<(Vec<OccupancyFrame>, Vec<OccupancyFrame>)>,
}

/// Individual terms; `None` marks an absent modality.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub action: f64,
    pub static_image: Option<f64>,
    pub wrist_image: Option<f64>,
    pub occupancy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub total: f64,
    pub clamped_gripper_probs: usize,
}

/// `l_a + λ_image (l_simg + l_gimg) + λ_occ l_o`; absent terms count as zero.
pub fn combine(terms: LossTerms, weights: &LossWeights) -> f64 {
    let images = terms.static_image.unwrap_or(0.0) + terms.wrist_image.unwrap_or(0.0);
    terms.action + weights.image * images + weights.occupancy * terms.occupancy.unwrap_or(0.0)
}

pub fn total_loss(
    bundle: &PredictionBundle,
    weights: &LossWeights,
    selection: VoxelSelection,
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let action = action_loss(&bundle.actions, &bundle.action_targets, weights.gripper)?;
    let image = |pair: &Option<(Vec<ImageTensor>, Vec<ImageTensor>)>| {
        pair.as_ref().map(|(p, t)| image_loss(p, t)).transpose()
    };
    let terms = LossTerms {
        action: action.value,
        static_image: image(&bundle.static_images)?,
        wrist_image: image(&bundle.wrist_images)?,
        occupancy: bundle
            .occupancy
            .as_ref()
            .map(|(p, t)| occupancy_loss(p, t, weights.rgb, selection))
            .transpose()?,
    };
    Ok(LossBreakdown {
        total: combine(terms, weights),
        terms,
        weights: *weights,
        clamped_gripper_probs: action.clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn act(pose: [f64; 6], p: f64) -> ActionPrediction {
        ActionPrediction { pose, gripper_prob: p }
    }
    fn tgt(pose: [f64; 6], g: f64) -> ActionTarget {
        ActionTarget { pose, gripper: g }
    }

    #[test]
    fn action_examples() {
        let l = action_loss(&[act([0.0; 6], 1.0 - PROB_EPS)], &[tgt([0.0; 6], 1.0)], 0.01).unwrap();
        assert!(l.value > 0.0 && l.value < 1e-8);
        assert_eq!(l.clamped, 0);

        let mut pose = [0.0; 6];
        pose[0] = 0.1;
        let l = action_loss(&[act(pose, 1.0 - PROB_EPS)], &[tgt([0.0; 6], 1.0)], 0.0).unwrap();
        assert_abs_diff_eq!(l.value, 0.01 / 6.0, epsilon = 1e-15);

        assert_abs_diff_eq!(bce(0.5, 1.0), std::f64::consts::LN_2, epsilon = 1e-12);
        let l = action_loss(&[act([0.0; 6], 0.5)], &[tgt([0.0; 6], 1.0)], 0.01).unwrap();
        assert_abs_diff_eq!(l.value, 0.01 * std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_probability_is_clamped_and_counted() {
        let l = action_loss(
            &[act([0.0; 6], 1.2), act([0.0; 6], 0.0)],
            &[tgt([0.0; 6], 1.0), tgt([0.0; 6], -1.0)],
            1.0,
        )
        .unwrap();
        assert_eq!(l.clamped, 2);
        assert!(l.value.is_finite());
        assert!(action_loss(&[act([0.0; 6], 0.5)], &[tgt([0.0; 6], 0.3)], 1.0).is_err());
        assert!(action_loss(&[act([0.0; 6], 0.5)], &[], 1.0).is_err());
    }

    #[test]
    fn image_examples() {
        let a = ImageTensor::filled(2, 2, 1, 0.25);
        assert_eq!(image_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let b = ImageTensor::filled(2, 2, 1, 0.75);
        assert_eq!(image_loss(&[a.clone()], &[b]).unwrap(), 1.0);
        let mut nan = a.clone();
        nan.data[2] = f64::NAN;
        assert!(matches!(image_loss(&[nan], &[a.clone()]), Err(LossError::NonFinite(_))));
        assert!(matches!(
            image_loss(&[a], &[ImageTensor::filled(1, 2, 1, 0.0)]),
            Err(LossError::Shape(_))
        ));
    }

    fn frame(occ: bool, pos: [f64; 3], rgb: [f64; 3]) -> OccupancyFrame {
        OccupancyFrame { occupied: vec![occ], pos: vec![pos], rgb: vec![rgb] }
    }

    #[test]
    fn occupancy_examples() {
        let t = frame(true, [0.0; 3], [0.0; 3]);
        assert_eq!(occupancy_loss(&[t.clone()], &[t.clone()], 0.5, VoxelSelection::Union).unwrap(), 0.0);
        let p = frame(true, [0.1, 0.0, 0.0], [0.2, 0.0, 0.0]);
        let l = occupancy_loss(&[p.clone()], &[t.clone()], 0.5, VoxelSelection::Union).unwrap();
        assert_abs_diff_eq!(l, 0.03, epsilon = 1e-15);
        let l = occupancy_loss(&[p.clone()], &[t.clone()], 0.0, VoxelSelection::Union).unwrap();
        assert_abs_diff_eq!(l, 0.01, epsilon = 1e-15);

        let empty = frame(false, [0.0; 3], [0.0; 3]);
        let p_empty = frame(false, [0.3, 0.0, 0.0], [0.0; 3]);
        assert_eq!(occupancy_loss(&[p_empty.clone()], &[empty.clone()], 0.5, VoxelSelection::Union).unwrap(), 0.0);
        assert!(occupancy_loss(&[p_empty], &[empty], 0.5, VoxelSelection::All).unwrap() > 0.0);

        let two = OccupancyFrame { occupied: vec![true; 2], pos: vec![[0.0; 3]; 2], rgb: vec![[0.0; 3]; 2] };
        assert!(matches!(
            occupancy_loss(&[two], &[t], 0.5, VoxelSelection::Union),
            Err(LossError::Shape(_))
        ));
    }

    #[test]
    fn combine_examples() {
        let w = LossWeights::default();
        let terms = LossTerms {
            action: 1.0,
            static_image: Some(2.0),
            wrist_image: Some(3.0),
            occupancy: Some(4.0),
        };
        assert_eq!(combine(terms, &w), 1.9);
        let only_action = LossTerms { action: 0.7, ..Default::default() };
        assert_eq!(combine(only_action, &w), 0.7);
        assert_eq!(combine(LossTerms::default(), &w), 0.0);
    }

    #[test]
    fn excluded_modality_equals_zero_weight() {
        let terms = LossTerms {
            action: 1.25,
            static_image: Some(2.5),
            wrist_image: Some(0.5),
            occupancy: Some(4.0),
        };
        let w = LossWeights { occupancy: 0.0, ..Default::default() };
        let dropped = LossTerms { occupancy: None, ..terms };
        assert_eq!(combine(terms, &w), combine(dropped, &LossWeights::default()));
    }

    #[test]
    fn total_loss_on_bundle() {
        let bundle = PredictionBundle {
            actions: vec![act([0.0; 6], 0.5)],
            action_targets: vec![tgt([0.0; 6], 1.0)],
            static_images: Some((vec![ImageTensor::filled(2, 2, 1, 0.0)], vec![ImageTensor::filled(2, 2, 1, 0.5)])),
            ..Default::default()
        };
        let b = total_loss(&bundle, &LossWeights::default(), VoxelSelection::Union).unwrap();
        assert_abs_diff_eq!(b.terms.action, 0.01 * std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(b.terms.static_image, Some(1.0));
        assert_eq!(b.terms.wrist_image, None);
        assert_abs_diff_eq!(b.total, b.terms.action + 0.1, epsilon = 1e-15);
        let bad = LossWeights { image: -1.0, ..Default::default() };
        assert_eq!(total_loss(&bundle, &bad, VoxelSelection::Union), Err(LossError::InvalidWeights));
    }
}
