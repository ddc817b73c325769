//! Per-region Dice and 95th-percentile Hausdorff distance.
//!
//! Regions compose labels: ET = {4}, TC = {1, 4}, WT = {1, 2, 4}.
//!
//! HD95 pools both directed surface-distance sets (`d(t, P)` for every
//! truth-surface voxel, `d(p, T)` for every prediction-surface voxel) and
//! takes the 95th percentile with linear interpolation. A surface voxel is a
//! region voxel with at least one 6-connected neighbour outside the region;
//! neighbours beyond the grid count as outside. Distances are in millimetres.
//!
//! Conventions for empty regions: Dice is 1 when both are empty and 0 when
//! exactly one is; HD95 is 0 when both are empty and `+inf` (undefined) when
//! exactly one is.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::LabelMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    ET,
    TC,
    WT,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::ET, Region::TC, Region::WT];

    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::ET => &[4],
            Region::TC => &[1, 4],
            Region::WT => &[1, 2, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::ET => "ET",
            Region::TC => "TC",
            Region::WT => "WT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::dim(format!("binary mask {dims:?} has {} voxels", data.len())));
        }
        Ok(BinaryMask { dims, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Voxel coordinates of the region surface.
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let [h, w, d] = self.dims;
        let at = |i: usize, j: usize, k: usize| self.data[(i * w + j) * d + k];
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    if !at(i, j, k) {
                        continue;
                    }
                    let boundary = i == 0
                        || i + 1 == h
                        || j == 0
                        || j + 1 == w
                        || k == 0
                        || k + 1 == d
                        || !at(i - 1, j, k)
                        || !at(i + 1, j, k)
                        || !at(i, j - 1, k)
                        || !at(i, j + 1, k)
                        || !at(i, j, k - 1)
                        || !at(i, j, k + 1);
                    if boundary {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }
}

pub fn binarize_region(mask: &LabelMask, region: Region) -> BinaryMask {
    let labels = region.labels();
    BinaryMask {
        dims: mask.dims(),
        data: mask.labels().iter().map(|l| labels.contains(l)).collect(),
    }
}

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::dim(format!("masks {:?} and {:?} differ", a.dims, b.dims)));
    }
    Ok(())
}

/// `2TP / (FN + FP + 2TP)`.
pub fn dice_score(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    same_dims(pred, truth)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (fn_ + fp + 2 * tp) as f64)
}

/// Squared Euclidean distance transform (mm^2) to the `sites` set.
/// Exact: separable lower-envelope passes along each axis.
fn squared_edt(dims: [usize; 3], spacing: [f64; 3], sites: &[[usize; 3]]) -> Vec<f64> {
    let [h, w, d] = dims;
    let mut f = vec![f64::INFINITY; h * w * d];
    for s in sites {
        f[(s[0] * w + s[1]) * d + s[2]] = 0.0;
    }
    let strides = [w * d, d, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|i| f[base + i * stride]));
                lower_envelope(&line, spacing[axis], &mut out);
                for (i, &v) in out.iter().enumerate() {
                    f[base + i * stride] = v;
                }
            }
        }
    }
    f
}

/// 1-D transform `out[q] = min_p ((q - p) * step)^2 + g[p]` over finite `g[p]`.
fn lower_envelope(g: &[f64], step: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = g.len();
    let pos = |i: usize| i as f64 * step;
    let mut verts: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !g[q].is_finite() {
            continue;
        }
        loop {
            let Some(&v) = verts.last() else {
                verts.push(q);
                bounds.clear();
                bounds.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((g[q] + pos(q) * pos(q)) - (g[v] + pos(v) * pos(v))) / (2.0 * (pos(q) - pos(v)));
            if s <= *bounds.last().expect("bound per vertex") {
                verts.pop();
                bounds.pop();
                continue;
            }
            verts.push(q);
            bounds.push(s);
            break;
        }
    }
    if verts.is_empty() {
        out.resize(n, f64::INFINITY);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < verts.len() && bounds[k + 1] < pos(q) {
            k += 1;
        }
        let dq = pos(q) - pos(verts[k]);
        out.push(dq * dq + g[verts[k]]);
    }
}

/// Pooled directed surface distances, or `None` when exactly one region is empty.
/// Both empty yields an empty list.
pub fn surface_distances(pred: &BinaryMask, truth: &BinaryMask, spacing: [f64; 3]) -> Result<Option<Vec<f64>>> {
    same_dims(pred, truth)?;
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::param(format!("spacing {spacing:?} must be positive")));
    }
    let (sp, st) = (pred.surface(), truth.surface());
    match (sp.is_empty(), st.is_empty()) {
        (true, true) => return Ok(Some(Vec::new())),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let [_, w, d] = pred.dims;
    let flat = |c: &[usize; 3]| (c[0] * w + c[1]) * d + c[2];
    let to_pred = squared_edt(pred.dims, spacing, &sp);
    let to_truth = squared_edt(pred.dims, spacing, &st);
    let mut dists: Vec<f64> = st.iter().map(|t| to_pred[flat(t)].sqrt()).collect();
    dists.extend(sp.iter().map(|p| to_truth[flat(p)].sqrt()));
    Ok(Some(dists))
}

/// Percentile `q` in [0, 100] with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

fn hd_percentile(pred: &BinaryMask, truth: &BinaryMask, spacing: [f64; 3], q: f64) -> Result<f64> {
    Ok(match surface_distances(pred, truth, spacing)? {
        None => f64::INFINITY,
        Some(d) if d.is_empty() => 0.0,
        Some(d) => percentile(&d, q),
    })
}

pub fn hd95(pred: &BinaryMask, truth: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    hd_percentile(pred, truth, spacing, 95.0)
}

/// Classical (maximum) Hausdorff distance between the surfaces.
pub fn hd100(pred: &BinaryMask, truth: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    hd_percentile(pred, truth, spacing, 100.0)
}

/// Scores for one case; arrays are indexed ET, TC, WT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    pub dice: [f64; 3],
    /// `+inf` marks an undefined distance (exactly one region empty);
    /// serialized as `null`.
    #[serde(with = "sentinel")]
    pub hd95: [f64; 3],
}

impl CaseScores {
    pub fn dice_avg(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }

    pub fn hd95_avg(&self) -> f64 {
        self.hd95.iter().sum::<f64>() / 3.0
    }

    /// Table columns: Dice ET, TC, WT, Avg, then HD95 ET, TC, WT, Avg.
    pub fn columns(&self) -> [f64; 8] {
        let [de, dt, dw] = self.dice;
        let [he, ht, hw] = self.hd95;
        [de, dt, dw, self.dice_avg(), he, ht, hw, self.hd95_avg()]
    }

    pub fn has_undefined(&self) -> bool {
        self.hd95.iter().any(|v| !v.is_finite())
    }
}

pub fn evaluate_case(case_id: &str, pred: &LabelMask, truth: &LabelMask, spacing: [f64; 3]) -> Result<CaseScores> {
    if pred.dims() != truth.dims() {
        return Err(Error::dim(format!(
            "{case_id}: prediction {:?} and truth {:?} differ",
            pred.dims(),
            truth.dims()
        )));
    }
    let mut scores = CaseScores {
        case_id: case_id.to_string(),
        dice: [0.0; 3],
        hd95: [0.0; 3],
    };
    for (i, r) in Region::ALL.into_iter().enumerate() {
        let (p, t) = (binarize_region(pred, r), binarize_region(truth, r));
        scores.dice[i] = dice_score(&p, &t)?;
        scores.hd95[i] = hd95(&p, &t, spacing)?;
    }
    Ok(scores)
}

/// Mean and population standard deviation of one column over the cases
/// where it is finite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    /// Cases whose value was undefined and therefore excluded.
    pub excluded: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut excluded = 0;
        let finite: Vec<f64> = values
            .into_iter()
            .filter(|v| {
                let ok = v.is_finite();
                excluded += usize::from(!ok);
                ok
            })
            .collect();
        if finite.is_empty() {
            return Aggregate {
                mean: f64::NAN,
                std: f64::NAN,
                excluded,
            };
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let std = (finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Aggregate { mean, std, excluded }
    }
}

pub const COLUMNS: [&str; 8] = [
    "Dice_ET", "Dice_TC", "Dice_WT", "Dice_Avg", "HD95_ET", "HD95_TC", "HD95_WT", "HD95_Avg",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Free-form label, e.g. the modality keep-set of an ablation run.
    pub tag: String,
    pub cases: Vec<CaseScores>,
    /// One aggregate per entry of [`COLUMNS`].
    #[serde(with = "aggregates")]
    pub aggregates: [Aggregate; 8],
}

impl EvalReport {
    pub fn new(tag: impl Into<String>, cases: Vec<CaseScores>) -> Self {
        let aggregates = std::array::from_fn(|c| Aggregate::of(cases.iter().map(|s| s.columns()[c])));
        EvalReport {
            tag: tag.into(),
            cases,
            aggregates,
        }
    }

    /// Recomputes the aggregates from the per-case rows.
    pub fn recomputed(&self) -> EvalReport {
        EvalReport::new(self.tag.clone(), self.cases.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("report: {e}")))
    }

    /// Plain-text table: Dice in percent, HD95 in mm, `mean±std` footer.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if !self.tag.is_empty() {
            let _ = writeln!(out, "# {}", self.tag);
        }
        let _ = write!(out, "{:<24}", "case");
        for c in COLUMNS {
            let _ = write!(out, "\t{c:>14}");
        }
        out.push('\n');
        for case in &self.cases {
            let _ = write!(out, "{:<24}", case.case_id);
            for (i, v) in case.columns().into_iter().enumerate() {
                let _ = write!(out, "\t{:>14}", fmt_cell(i, v));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<24}", "mean±std");
        for (i, a) in self.aggregates.iter().enumerate() {
            let scale = if i < 4 { 100.0 } else { 1.0 };
            let cell = if a.mean.is_nan() {
                "n/a".to_string()
            } else {
                format!("{:.2}±{:.2}", a.mean * scale, a.std * scale)
            };
            let _ = write!(out, "\t{cell:>14}");
        }
        out.push('\n');
        out
    }
}

fn fmt_cell(column: usize, v: f64) -> String {
    if !v.is_finite() {
        "undef".into()
    } else if column < 4 {
        format!("{:.2}", v * 100.0)
    } else {
        format!("{v:.2}")
    }
}

mod sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
        v.map(|x| x.is_finite().then_some(x)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
        let v = <[Option<f64>; 3]>::deserialize(d)?;
        Ok(v.map(|x| x.unwrap_or(f64::INFINITY)))
    }
}

mod aggregates {
    use super::{Aggregate, COLUMNS};
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        mean: Option<f64>,
        std: Option<f64>,
        excluded: usize,
    }

    pub fn serialize<S: Serializer>(v: &[Aggregate; 8], s: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, Entry> = COLUMNS
            .iter()
            .zip(v)
            .map(|(&k, a)| {
                (
                    k,
                    Entry {
                        mean: a.mean.is_finite().then_some(a.mean),
                        std: a.std.is_finite().then_some(a.std),
                        excluded: a.excluded,
                    },
                )
            })
            .collect();
        map.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[Aggregate; 8], D::Error> {
        let mut map = BTreeMap::<String, Entry>::deserialize(d)?;
        let mut out = [Aggregate {
            mean: f64::NAN,
            std: f64::NAN,
            excluded: 0,
        }; 8];
        for (i, k) in COLUMNS.iter().enumerate() {
            let e = map.remove(*k).ok_or_else(|| D::Error::custom(format!("missing aggregate {k}")))?;
            out[i] = Aggregate {
                mean: e.mean.unwrap_or(f64::NAN),
                std: e.std.unwrap_or(f64::NAN),
                excluded: e.excluded,
            };
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let mut data = vec![false; dims.iter().product()];
        for c in on {
            data[(c[0] * dims[1] + c[1]) * dims[2] + c[2]] = true;
        }
        BinaryMask { dims, data }
    }

    #[test]
    fn region_composition() {
        let m = LabelMask::new([1, 1, 3], vec![4, 2, 1]).unwrap();
        assert_eq!(binarize_region(&m, Region::ET).data, vec![true, false, false]);
        assert_eq!(binarize_region(&m, Region::TC).data, vec![true, false, true]);
        assert_eq!(binarize_region(&m, Region::WT).data, vec![true, true, true]);
        let z = LabelMask::zeros([2, 2, 2]);
        for r in Region::ALL {
            assert!(binarize_region(&z, r).is_empty());
        }
    }

    #[test]
    fn dice_arithmetic() {
        // TP = 2, FP = 1, FN = 1
        let p = mask([1, 1, 4], &[[0, 0, 0], [0, 0, 1], [0, 0, 2]]);
        let t = mask([1, 1, 4], &[[0, 0, 0], [0, 0, 1], [0, 0, 3]]);
        assert!((dice_score(&p, &t).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(dice_score(&p, &p).unwrap(), 1.0);
        let e = mask([1, 1, 4], &[]);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert_eq!(dice_score(&e, &t).unwrap(), 0.0);
        assert!(dice_score(&e, &mask([1, 1, 3], &[])).is_err());
    }

    #[test]
    fn three_four_five() {
        let p = mask([5, 5, 1], &[[0, 0, 0]]);
        let t = mask([5, 5, 1], &[[3, 4, 0]]);
        assert_eq!(hd95(&p, &t, [1.0; 3]).unwrap(), 5.0);
        assert_eq!(hd95(&p, &p, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn anisotropic_spacing() {
        let p = mask([5, 5, 1], &[[0, 0, 0]]);
        let t = mask([5, 5, 1], &[[3, 4, 0]]);
        let d = hd95(&p, &t, [2.0, 0.5, 1.0]).unwrap();
        assert!((d - (36.0f64 + 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        let e = mask([3, 3, 3], &[]);
        let t = mask([3, 3, 3], &[[1, 1, 1]]);
        assert_eq!(hd95(&e, &e, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&e, &t, [1.0; 3]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn surface_excludes_interior() {
        let all: Vec<[usize; 3]> = (0..27).map(|i| [i / 9, (i / 3) % 3, i % 3]).collect();
        let cube = mask([3, 3, 3], &all);
        assert_eq!(cube.surface().len(), 26);
        let big: Vec<[usize; 3]> = (0..27).map(|i| [1 + i / 9, 1 + (i / 3) % 3, 1 + i % 3]).collect();
        let inner = mask([5, 5, 5], &big);
        assert!(!inner.surface().contains(&[2, 2, 2]));
    }

    #[test]
    fn report_json_round_trip_with_sentinel() {
        let cases = vec![
            CaseScores {
                case_id: "a".into(),
                dice: [1.0, 0.5, 0.25],
                hd95: [0.0, 2.0, f64::INFINITY],
            },
            CaseScores {
                case_id: "b".into(),
                dice: [0.0, 0.5, 0.75],
                hd95: [1.0, 3.0, 4.0],
            },
        ];
        let report = EvalReport::new("all", cases);
        assert_eq!(report.aggregates[6].excluded, 1);
        assert_eq!(report.aggregates[6].mean, 4.0);
        let back = EvalReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back.cases, report.cases);
        assert!(report.to_table().contains("undef"));
    }
}
