//! Evaluation suite for dyadic motion sequences: VAD-gated segmentation,
//! dynamic-deviation metrics over frame-to-frame velocities, Fréchet
//! distances between Gaussian fits, MSE, sample diversity, partner
//! correlation, and parameter-space analogues of lip-vertex / head-vertex
//! errors.
//!
//! Every metric operates on denormalized `[frames, channels]` parameter
//! sequences and reports unscaled values (no ×10/×100 readability scaling).
//! Speaking/listening intervals are derived strictly from the two VAD
//! streams: a frame is *speaking* iff the actor's VAD is on, *listening*
//! iff the actor is silent while the partner speaks, and excluded
//! otherwise. Velocities are always segment-local — no frame difference is
//! ever taken across a segment gap.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::synthdata::GroupPartition;

/// Eigenvalue floor used to repair covariance fits to positive
/// semi-definite form.
pub const EIG_FLOOR: f64 = 1e-10;

// ---------------------------------------------------------------------------
// VAD segmentation
// ---------------------------------------------------------------------------

/// Conversational role of an evaluation interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    /// Actor VAD on (regardless of the partner).
    Speaking,
    /// Actor silent while the partner speaks.
    Listening,
}

impl SegmentKind {
    /// Report-key component ("speaking" / "listening").
    pub fn label(&self) -> &'static str {
        match self {
            SegmentKind::Speaking => "speaking",
            SegmentKind::Listening => "listening",
        }
    }
}

/// Half-open frame interval `[start, end)` with a single role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
}

/// Disjoint, ordered set of evaluation intervals for one sequence.
#[derive(Clone, Debug, Default)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
}

impl SegmentSet {
    /// `(start, end)` pairs of all segments of one kind, in frame order.
    pub fn ranges(&self, kind: SegmentKind) -> Vec<(usize, usize)> {
        self.segments.iter().filter(|s| s.kind == kind).map(|s| (s.start, s.end)).collect()
    }

    /// Flat list of frame indices covered by segments of one kind.
    pub fn frames(&self, kind: SegmentKind) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.kind == kind)
            .flat_map(|s| s.start..s.end)
            .collect()
    }

    /// Number of frames covered by segments of one kind.
    pub fn frame_count(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|s| s.kind == kind).map(|s| s.end - s.start).sum()
    }
}

/// Segment a sequence by the two VAD streams: speaking ⇔ actor VAD on,
/// listening ⇔ actor silent ∧ partner speaking; frames with neither flag
/// are excluded from evaluation. Consecutive frames of equal kind merge
/// into one run.
pub fn vad_segments(actor_vad: &[bool], partner_vad: &[bool]) -> Result<SegmentSet> {
    if actor_vad.len() != partner_vad.len() {
        return Err(Error::Shape(format!(
            "VAD streams disagree: actor {} vs partner {} frames",
            actor_vad.len(),
            partner_vad.len()
        )));
    }
    let kind_of = |f: usize| -> Option<SegmentKind> {
        if actor_vad[f] {
            Some(SegmentKind::Speaking)
        } else if partner_vad[f] {
            Some(SegmentKind::Listening)
        } else {
            None
        }
    };
    let mut segments = Vec::new();
    let mut open: Option<Segment> = None;
    for f in 0..actor_vad.len() {
        let kind = kind_of(f);
        match (&mut open, kind) {
            (Some(seg), Some(k)) if seg.kind == k => seg.end = f + 1,
            (slot, k) => {
                if let Some(seg) = slot.take() {
                    segments.push(seg);
                }
                *slot = k.map(|kind| Segment { start: f, end: f + 1, kind });
            }
        }
    }
    if let Some(seg) = open {
        segments.push(seg);
    }
    Ok(SegmentSet { segments })
}

// ---------------------------------------------------------------------------
// Gaussian fits and Fréchet distance
// ---------------------------------------------------------------------------

/// Mean and covariance of a feature group, used by the Fréchet metrics.
///
/// The covariance is the unbiased (n−1) estimator, eigenvalue-floored at
/// [`EIG_FLOOR`] so downstream matrix square roots stay well defined.
#[derive(Clone, Debug)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Row-major `[dim, dim]` covariance, symmetric PSD after repair.
    pub cov: Array<f64>,
}

/// Fit a Gaussian to feature rows (one row per frame). Needs at least two
/// rows for the unbiased covariance.
pub fn gaussian_fit(rows: &[Vec<f64>]) -> Result<GaussianFit> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Contract(format!("gaussian fit needs ≥ 2 rows, got {n}")));
    }
    let dim = rows[0].len();
    if dim == 0 {
        return Err(Error::Contract("gaussian fit on empty feature rows".into()));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::Shape(format!(
                "gaussian fit row {i} has {} features, expected {dim}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("gaussian fit row {i} is non-finite")));
        }
    }
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for row in rows {
        let dev: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..dim {
            for b in 0..dim {
                cov[(a, b)] += dev[a] * dev[b];
            }
        }
    }
    cov /= (n - 1) as f64;
    let cov = psd_repair(&cov);
    let data: Vec<f64> = (0..dim).flat_map(|a| (0..dim).map(move |b| (a, b))).map(|(a, b)| cov[(a, b)]).collect();
    Ok(GaussianFit { mean, cov: Array::new(vec![dim, dim], data)? })
}

/// Floor the eigenvalues of a symmetric matrix at [`EIG_FLOOR`] and
/// reconstruct, re-symmetrizing against round-off.
fn psd_repair(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(EIG_FLOOR)),
    );
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&rebuilt + rebuilt.transpose()) * 0.5
}

/// Symmetric PSD matrix square root: eigendecompose, clamp negative
/// eigenvalues to zero, take elementwise square roots, reconstruct.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn cov_matrix(fit: &GaussianFit) -> Result<DMatrix<f64>> {
    let dim = fit.mean.len();
    if fit.cov.shape() != [dim, dim] {
        return Err(Error::Shape(format!(
            "covariance shape {:?} does not match mean dim {dim}",
            fit.cov.shape()
        )));
    }
    Ok(DMatrix::from_row_slice(dim, dim, fit.cov.data()))
}

/// Fréchet distance between two Gaussian fits:
/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`.
///
/// The cross term uses `Tr((Σ_a Σ_b)^{1/2}) = Tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`
/// so every square root goes through a symmetric eigendecomposition with a
/// negative-eigenvalue clamp. The result is clamped at zero against
/// round-off on near-identical fits.
pub fn frechet_distance(fit_a: &GaussianFit, fit_b: &GaussianFit) -> Result<f64> {
    if fit_a.mean.len() != fit_b.mean.len() {
        return Err(Error::Shape(format!(
            "Fréchet fits disagree: {} vs {} features",
            fit_a.mean.len(),
            fit_b.mean.len()
        )));
    }
    let mean_term: f64 =
        fit_a.mean.iter().zip(&fit_b.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let cov_a = cov_matrix(fit_a)?;
    let cov_b = cov_matrix(fit_b)?;
    let a_half = psd_sqrt(&cov_a);
    let inner = &a_half * &cov_b * &a_half;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

fn select_channels(row: &[f64], ranges: &[Range<usize>]) -> Vec<f64> {
    ranges.iter().flat_map(|r| row[r.clone()].iter().copied()).collect()
}

/// Gather the selected channels of the selected frames as feature rows.
pub fn gather_rows(
    data: &Array<f64>,
    frames: &[usize],
    ranges: &[Range<usize>],
) -> Result<Vec<Vec<f64>>> {
    check_frame_matrix(data, "gather")?;
    check_ranges(data, ranges)?;
    let dim = data.last_dim();
    let mut rows = Vec::with_capacity(frames.len());
    for &f in frames {
        if f >= data.n_rows() {
            return Err(Error::Contract(format!(
                "frame {f} outside sequence of {} frames",
                data.n_rows()
            )));
        }
        let row = &data.data()[f * dim..(f + 1) * dim];
        rows.push(select_channels(row, ranges));
    }
    Ok(rows)
}

/// Joint speaker–listener Fréchet distance: fit Gaussians to concatenated
/// `[actor ; partner]` frame features for prediction and ground truth, then
/// measure the distance between the fits. Sensitive to the *relation*
/// between the two tracks, not just the actor's marginal distribution.
pub fn paired_fd(
    pred_actor: &Array<f64>,
    partner: &Array<f64>,
    gt_actor: &Array<f64>,
) -> Result<f64> {
    check_same_shape(pred_actor, gt_actor, "paired FD pred/gt")?;
    check_same_shape(pred_actor, partner, "paired FD actor/partner")?;
    let frames: Vec<usize> = (0..pred_actor.n_rows()).collect();
    let all = [0..pred_actor.last_dim()];
    let joint = |actor: &Array<f64>| -> Result<Vec<Vec<f64>>> {
        let a = gather_rows(actor, &frames, &all)?;
        let p = gather_rows(partner, &frames, &all)?;
        Ok(a.into_iter()
            .zip(p)
            .map(|(mut row, partner_row)| {
                row.extend(partner_row);
                row
            })
            .collect())
    };
    frechet_distance(&gaussian_fit(&joint(pred_actor)?)?, &gaussian_fit(&joint(gt_actor)?)?)
}

// ---------------------------------------------------------------------------
// Velocity dynamics
// ---------------------------------------------------------------------------

/// First-order frame differences over the given channel ranges, collected
/// within each segment independently so no velocity bridges a gap.
fn velocity_samples(
    data: &Array<f64>,
    ranges: &[Range<usize>],
    segments: &[(usize, usize)],
) -> Result<Vec<f64>> {
    check_frame_matrix(data, "velocity")?;
    check_ranges(data, ranges)?;
    check_segments(data, segments)?;
    let dim = data.last_dim();
    let raw = data.data();
    let mut vals = Vec::new();
    for &(start, end) in segments {
        for f in start + 1..end {
            let cur = &raw[f * dim..(f + 1) * dim];
            let prev = &raw[(f - 1) * dim..f * dim];
            for r in ranges {
                for c in r.clone() {
                    vals.push(cur[c] - prev[c]);
                }
            }
        }
    }
    Ok(vals)
}

/// Population standard deviation of segment-local frame-to-frame
/// velocities, pooled over segment frames and group channels. Zero when no
/// segment spans more than one frame.
///
/// Population (not sample) normalization keeps the hand oracle exact:
/// alternating ±1 velocities have std exactly 1. The unbiased-estimator
/// convention applies to covariance fits, not to this pooled std.
pub fn velocity_std(
    data: &Array<f64>,
    ranges: &[Range<usize>],
    segments: &[(usize, usize)],
) -> Result<f64> {
    Ok(population_std(&velocity_samples(data, ranges, segments)?))
}

/// [`velocity_std`] pooled across several sequences, each with its own
/// segment list — the corpus-level statistic behind the collapse ratio.
pub fn pooled_velocity_std<'a>(
    tracks: impl IntoIterator<Item = (&'a Array<f64>, &'a [(usize, usize)])>,
    ranges: &[Range<usize>],
) -> Result<f64> {
    let mut vals = Vec::new();
    for (data, segments) in tracks {
        vals.extend(velocity_samples(data, ranges, segments)?);
    }
    Ok(population_std(&vals))
}

/// Dynamic deviation: `|std(velocities of pred) − std(velocities of gt)|`
/// pooled over segment frames and group channels. Instantiated as FDD over
/// expression channels, PDD over neck+rotation, JDD over jaw.
pub fn dynamic_deviation(
    pred: &Array<f64>,
    gt: &Array<f64>,
    ranges: &[Range<usize>],
    segments: &[(usize, usize)],
) -> Result<f64> {
    check_same_shape(pred, gt, "dynamic deviation")?;
    Ok((velocity_std(pred, ranges, segments)? - velocity_std(gt, ranges, segments)?).abs())
}

fn population_std(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

// ---------------------------------------------------------------------------
// Pointwise and correlation metrics
// ---------------------------------------------------------------------------

/// Mean squared error over segment frames and group channels. Zero when the
/// segments cover no frames.
pub fn mse_metric(
    pred: &Array<f64>,
    gt: &Array<f64>,
    ranges: &[Range<usize>],
    segments: &[(usize, usize)],
) -> Result<f64> {
    check_same_shape(pred, gt, "MSE")?;
    check_frame_matrix(pred, "MSE")?;
    check_ranges(pred, ranges)?;
    check_segments(pred, segments)?;
    let dim = pred.last_dim();
    let (mut sum, mut count) = (0.0, 0usize);
    for &(start, end) in segments {
        for f in start..end {
            let p = &pred.data()[f * dim..(f + 1) * dim];
            let g = &gt.data()[f * dim..(f + 1) * dim];
            for r in ranges {
                for c in r.clone() {
                    let d = p[c] - g[c];
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Pearson correlation of two equal-length series; zero when either side
/// has no variance (degenerate channels carry no synchrony signal).
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Residual Pearson correlation vs the partner track:
/// `|PCC(pred, partner) − PCC(gt, partner)|`, with each PCC computed per
/// channel over the segment frames and then averaged across the group's
/// channels. Zero when the prediction reproduces the ground-truth synchrony
/// exactly; sign flips in the prediction move the PCC and therefore rPCC.
pub fn rpcc(
    pred: &Array<f64>,
    gt: &Array<f64>,
    partner: &Array<f64>,
    ranges: &[Range<usize>],
    segments: &[(usize, usize)],
) -> Result<f64> {
    check_same_shape(pred, gt, "rPCC pred/gt")?;
    check_same_shape(pred, partner, "rPCC actor/partner")?;
    check_frame_matrix(pred, "rPCC")?;
    check_ranges(pred, ranges)?;
    check_segments(pred, segments)?;
    let frames: Vec<usize> = segments.iter().flat_map(|&(s, e)| s..e).collect();
    if frames.len() < 2 {
        return Ok(0.0);
    }
    let dim = pred.last_dim();
    let column = |data: &Array<f64>, c: usize| -> Vec<f64> {
        frames.iter().map(|&f| data.data()[f * dim + c]).collect()
    };
    let (mut pcc_pred, mut pcc_gt, mut channels) = (0.0, 0.0, 0usize);
    for r in ranges {
        for c in r.clone() {
            let partner_col = column(partner, c);
            pcc_pred += pearson(&column(pred, c), &partner_col);
            pcc_gt += pearson(&column(gt, c), &partner_col);
            channels += 1;
        }
    }
    if channels == 0 {
        return Ok(0.0);
    }
    Ok(((pcc_pred - pcc_gt) / channels as f64).abs())
}

/// Maximum L2 error over the given channels across segment frames — the
/// parameter-space analogue of lip-vertex error when applied to the jaw
/// group on speaking segments. Zero when the segments cover no frames.
pub fn lve_analogue(
    pred: &Array<f64>,
    gt: &Array<f64>,
    ranges: &[Range<usize>],
    segments: &[(usize, usize)],
) -> Result<f64> {
    check_same_shape(pred, gt, "LVE analogue")?;
    check_frame_matrix(pred, "LVE analogue")?;
    check_ranges(pred, ranges)?;
    check_segments(pred, segments)?;
    let dim = pred.last_dim();
    let mut worst = 0.0f64;
    for &(start, end) in segments {
        for f in start..end {
            let p = &pred.data()[f * dim..(f + 1) * dim];
            let g = &gt.data()[f * dim..(f + 1) * dim];
            let mut sq = 0.0;
            for r in ranges {
                for c in r.clone() {
                    let d = p[c] - g[c];
                    sq += d * d;
                }
            }
            worst = worst.max(sq.sqrt());
        }
    }
    Ok(worst)
}

/// Mean L2 error across all channels over all frames — the parameter-space
/// analogue of mean head-vertex distance. Frame order does not matter.
pub fn mhd_analogue(pred: &Array<f64>, gt: &Array<f64>) -> Result<f64> {
    check_same_shape(pred, gt, "MHD analogue")?;
    check_frame_matrix(pred, "MHD analogue")?;
    let (frames, dim) = (pred.n_rows(), pred.last_dim());
    if frames == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for f in 0..frames {
        let p = &pred.data()[f * dim..(f + 1) * dim];
        let g = &gt.data()[f * dim..(f + 1) * dim];
        let sq: f64 = p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq.sqrt();
    }
    Ok(total / frames as f64)
}

/// Self-intersection diversity: mean over frames of the mean pairwise L2
/// distance between S generations' group features at that frame. Zero for
/// identical samples; equals |δ| for two samples offset by δ in one channel.
pub fn sid_diversity(samples: &[Array<f64>], ranges: &[Range<usize>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!(
            "diversity needs ≥ 2 generations, got {}",
            samples.len()
        )));
    }
    check_frame_matrix(&samples[0], "SID")?;
    check_ranges(&samples[0], ranges)?;
    for s in &samples[1..] {
        check_same_shape(&samples[0], s, "SID samples")?;
    }
    let (frames, dim) = (samples[0].n_rows(), samples[0].last_dim());
    if frames == 0 {
        return Ok(0.0);
    }
    let pairs = (samples.len() * (samples.len() - 1) / 2) as f64;
    let mut total = 0.0;
    for f in 0..frames {
        let mut frame_sum = 0.0;
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let a = &samples[i].data()[f * dim..(f + 1) * dim];
                let b = &samples[j].data()[f * dim..(f + 1) * dim];
                let mut sq = 0.0;
                for r in ranges {
                    for c in r.clone() {
                        let d = a[c] - b[c];
                        sq += d * d;
                    }
                }
                frame_sum += sq.sqrt();
            }
        }
        total += frame_sum / pairs;
    }
    Ok(total / frames as f64)
}

// ---------------------------------------------------------------------------
// Shared input checks
// ---------------------------------------------------------------------------

fn check_frame_matrix(data: &Array<f64>, what: &str) -> Result<()> {
    if data.ndim() != 2 {
        return Err(Error::Shape(format!(
            "{what} expects a [frames, channels] matrix, got {:?}",
            data.shape()
        )));
    }
    Ok(())
}

fn check_same_shape(a: &Array<f64>, b: &Array<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what} inputs disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_ranges(data: &Array<f64>, ranges: &[Range<usize>]) -> Result<()> {
    for r in ranges {
        if r.end > data.last_dim() || r.start > r.end {
            return Err(Error::Contract(format!(
                "channel range {r:?} outside 0..{}",
                data.last_dim()
            )));
        }
    }
    Ok(())
}

fn check_segments(data: &Array<f64>, segments: &[(usize, usize)]) -> Result<()> {
    for &(start, end) in segments {
        if start >= end || end > data.n_rows() {
            return Err(Error::Contract(format!(
                "segment ({start}, {end}) invalid for {} frames",
                data.n_rows()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Corpus-level report
// ---------------------------------------------------------------------------

/// One evaluation case: an actor prediction aligned with its ground truth,
/// the partner's ground-truth track, and both VAD streams.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub pred: Array<f64>,
    pub gt: Array<f64>,
    pub partner: Array<f64>,
    pub actor_vad: Vec<bool>,
    pub partner_vad: Vec<bool>,
}

impl EvalCase {
    fn validate(&self) -> Result<()> {
        check_frame_matrix(&self.pred, "evaluation case")?;
        check_same_shape(&self.pred, &self.gt, "evaluation case pred/gt")?;
        check_same_shape(&self.pred, &self.partner, "evaluation case actor/partner")?;
        if self.actor_vad.len() != self.pred.n_rows() {
            return Err(Error::Shape(format!(
                "actor VAD has {} frames, motion has {}",
                self.actor_vad.len(),
                self.pred.n_rows()
            )));
        }
        if self.partner_vad.len() != self.actor_vad.len() {
            return Err(Error::Shape("partner VAD length disagrees with actor VAD".into()));
        }
        Ok(())
    }
}

/// Flat metric report keyed `metric.group.segment-kind`, e.g.
/// `fd.expr.listening`. Serializes directly to JSON; [`MetricReport::csv`]
/// emits a two-column table for plotting.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.values.insert(key.into(), value);
    }

    /// Two-column CSV (`metric,value`) in key order.
    pub fn csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Named channel groups a report covers: the three dynamic-deviation groups
/// plus the full channel set.
fn report_groups(groups: &GroupPartition) -> Vec<(&'static str, Vec<Range<usize>>)> {
    vec![
        ("expr", vec![groups.expr_range()]),
        ("jaw", vec![groups.jaw_range()]),
        ("pose", vec![groups.neck_range(), groups.rot_range()]),
        ("all", vec![0..groups.total()]),
    ]
}

/// Score a corpus of evaluation cases into one flat report.
///
/// Frame statistics pool across cases: dynamic deviations pool velocity
/// samples, Fréchet fits pool feature rows, MSE and rPCC pool segment
/// frames. The LVE analogue averages each case's speaking-segment maximum.
/// Distribution-level keys (`fd.*`) appear only when the pooled segment
/// kind covers at least two frames; `lve.jaw.speaking` appears only when
/// some case has a speaking frame.
pub fn evaluate_corpus(cases: &[EvalCase], groups: &GroupPartition) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::Contract("evaluation needs at least one case".into()));
    }
    for case in cases {
        case.validate()?;
        if case.pred.last_dim() != groups.total() {
            return Err(Error::Shape(format!(
                "case has {} channels, group partition covers {}",
                case.pred.last_dim(),
                groups.total()
            )));
        }
    }
    let segsets: Vec<SegmentSet> = cases
        .iter()
        .map(|c| vad_segments(&c.actor_vad, &c.partner_vad))
        .collect::<Result<_>>()?;

    let mut report = MetricReport::default();
    let group_list = report_groups(groups);
    let dd_named: [(&str, &str); 3] = [("fdd", "expr"), ("pdd", "pose"), ("jdd", "jaw")];

    for kind in [SegmentKind::Speaking, SegmentKind::Listening] {
        // Dynamic deviations on pooled velocity samples.
        for (metric, group_name) in dd_named {
            let ranges = &group_list.iter().find(|(n, _)| *n == group_name).expect("known group").1;
            let (mut pred_vals, mut gt_vals) = (Vec::new(), Vec::new());
            for (case, segs) in cases.iter().zip(&segsets) {
                let spans = segs.ranges(kind);
                pred_vals.extend(velocity_samples(&case.pred, ranges, &spans)?);
                gt_vals.extend(velocity_samples(&case.gt, ranges, &spans)?);
            }
            let dd = (population_std(&pred_vals) - population_std(&gt_vals)).abs();
            report.insert(format!("{metric}.{group_name}.{}", kind.label()), dd);
        }

        for (group_name, ranges) in &group_list {
            // Fréchet distance on pooled feature rows.
            let (mut pred_rows, mut gt_rows) = (Vec::new(), Vec::new());
            for (case, segs) in cases.iter().zip(&segsets) {
                let frames = segs.frames(kind);
                pred_rows.extend(gather_rows(&case.pred, &frames, ranges)?);
                gt_rows.extend(gather_rows(&case.gt, &frames, ranges)?);
            }
            if pred_rows.len() >= 2 {
                let fd = frechet_distance(&gaussian_fit(&pred_rows)?, &gaussian_fit(&gt_rows)?)?;
                report.insert(format!("fd.{group_name}.{}", kind.label()), fd);
            }

            // MSE pooled over segment frames and channels.
            let (mut sq_sum, mut sq_count) = (0.0, 0usize);
            for (case, segs) in cases.iter().zip(&segsets) {
                let spans = segs.ranges(kind);
                let frames: usize = spans.iter().map(|&(s, e)| e - s).sum();
                let channels: usize = ranges.iter().map(|r| r.len()).sum();
                if frames > 0 {
                    sq_sum += mse_metric(&case.pred, &case.gt, ranges, &spans)?
                        * (frames * channels) as f64;
                    sq_count += frames * channels;
                }
            }
            if sq_count > 0 {
                report.insert(
                    format!("mse.{group_name}.{}", kind.label()),
                    sq_sum / sq_count as f64,
                );
            }

            // rPCC on per-channel series pooled across cases.
            let channels: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
            let mut pooled: Vec<[Vec<f64>; 3]> =
                channels.iter().map(|_| [Vec::new(), Vec::new(), Vec::new()]).collect();
            for (case, segs) in cases.iter().zip(&segsets) {
                let dim = case.pred.last_dim();
                for f in segs.frames(kind) {
                    for (slot, &c) in pooled.iter_mut().zip(&channels) {
                        slot[0].push(case.pred.data()[f * dim + c]);
                        slot[1].push(case.gt.data()[f * dim + c]);
                        slot[2].push(case.partner.data()[f * dim + c]);
                    }
                }
            }
            if pooled.first().is_some_and(|s| s[0].len() >= 2) {
                let (mut p_sum, mut g_sum) = (0.0, 0.0);
                for [p, g, partner] in &pooled {
                    p_sum += pearson(p, partner);
                    g_sum += pearson(g, partner);
                }
                let n = pooled.len() as f64;
                report.insert(
                    format!("rpcc.{group_name}.{}", kind.label()),
                    ((p_sum - g_sum) / n).abs(),
                );
            }
        }
    }

    // Speaking-only jaw maximum, averaged over cases that speak at all.
    let jaw = [groups.jaw_range()];
    let (mut lve_sum, mut lve_cases) = (0.0, 0usize);
    for (case, segs) in cases.iter().zip(&segsets) {
        let spans = segs.ranges(SegmentKind::Speaking);
        if segs.frame_count(SegmentKind::Speaking) > 0 {
            lve_sum += lve_analogue(&case.pred, &case.gt, &jaw, &spans)?;
            lve_cases += 1;
        }
    }
    if lve_cases > 0 {
        report.insert("lve.jaw.speaking", lve_sum / lve_cases as f64);
    }

    // Whole-sequence means and the joint speaker–listener fit.
    let total_frames: usize = cases.iter().map(|c| c.pred.n_rows()).sum();
    if total_frames > 0 {
        let mut mhd_sum = 0.0;
        for case in cases {
            mhd_sum += mhd_analogue(&case.pred, &case.gt)? * case.pred.n_rows() as f64;
        }
        report.insert("mhd.all.all", mhd_sum / total_frames as f64);
    }
    if total_frames >= 2 {
        let joint_rows = |pick_pred: bool| -> Result<Vec<Vec<f64>>> {
            let mut rows = Vec::with_capacity(total_frames);
            for case in cases {
                let actor = if pick_pred { &case.pred } else { &case.gt };
                let dim = actor.last_dim();
                for f in 0..actor.n_rows() {
                    let mut row = actor.data()[f * dim..(f + 1) * dim].to_vec();
                    row.extend_from_slice(&case.partner.data()[f * dim..(f + 1) * dim]);
                    rows.push(row);
                }
            }
            Ok(rows)
        };
        let fd = frechet_distance(
            &gaussian_fit(&joint_rows(true)?)?,
            &gaussian_fit(&joint_rows(false)?)?,
        )?;
        report.insert("fd_paired.all.all", fd);
    }
    Ok(report)
}

/// Score a single case (convenience wrapper over [`evaluate_corpus`]).
pub fn evaluate_sample(case: &EvalCase, groups: &GroupPartition) -> Result<MetricReport> {
    evaluate_corpus(std::slice::from_ref(case), groups)
}
