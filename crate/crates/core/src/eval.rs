//! Accuracy-Confidence curves, their AUC, Spearman's ρ against lesion size
//! and report assembly.
//!
//! The curve removes lesions one at a time, most uncertain first, and tracks
//! the fraction of false and true positives that remain. Only the ranking of
//! the scores matters.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eleven lesion-uncertainty methods, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    GcnnClassif,
    GcnnReg,
    EntropyMean,
    EntropyLogsum,
    VarianceMean,
    VarianceLogsum,
    PcsMean,
    PcsLogsum,
    Size,
    MetaSegClassif,
    MetaSegReg,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::GcnnClassif,
        Method::GcnnReg,
        Method::EntropyMean,
        Method::EntropyLogsum,
        Method::VarianceMean,
        Method::VarianceLogsum,
        Method::PcsMean,
        Method::PcsLogsum,
        Method::Size,
        Method::MetaSegClassif,
        Method::MetaSegReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GcnnClassif => "GCNN_Classif",
            Method::GcnnReg => "GCNN_Reg",
            Method::EntropyMean => "Entropy_mean",
            Method::EntropyLogsum => "Entropy_logsum",
            Method::VarianceMean => "Variance_mean",
            Method::VarianceLogsum => "Variance_logsum",
            Method::PcsMean => "PCS_mean",
            Method::PcsLogsum => "PCS_logsum",
            Method::Size => "Size",
            Method::MetaSegClassif => "MetaSeg_Classif",
            Method::MetaSegReg => "MetaSeg_Reg",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifies a lesion across methods and files.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LesionKey {
    pub scan_id: String,
    pub lesion_id: u32,
}

impl LesionKey {
    pub fn new(scan_id: impl Into<String>, lesion_id: u32) -> Self {
        LesionKey {
            scan_id: scan_id.into(),
            lesion_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLesion {
    pub key: LesionKey,
    pub uncertainty: f64,
    pub tp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Fraction of lesions removed.
    pub tau: f64,
    pub fp_norm: f64,
    pub tp_norm: f64,
}

/// Most uncertain first; equal scores fall back to `(scan_id, lesion_id)`.
fn removal_order(records: &[ScoredLesion]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        rb.uncertainty
            .total_cmp(&ra.uncertainty)
            .then_with(|| ra.key.cmp(&rb.key))
    });
    order
}

/// Sweep every removal count `k = 0..=N` and integrate `tp_norm` over
/// `fp_norm` with the trapezoid rule. The AUC is returned in percent.
pub fn accuracy_confidence_curve(records: &[ScoredLesion]) -> Result<(Vec<CurvePoint>, f64)> {
    if let Some(r) = records.iter().find(|r| r.uncertainty.is_nan()) {
        return Err(Error::Evaluation(format!(
            "NaN uncertainty for lesion {}/{}",
            r.key.scan_id, r.key.lesion_id
        )));
    }
    let tp_total = records.iter().filter(|r| r.tp).count();
    let fp_total = records.len() - tp_total;
    if tp_total == 0 || fp_total == 0 {
        return Err(Error::Evaluation(format!(
            "curve needs at least one TP and one FP lesion (TP {tp_total}, FP {fp_total})"
        )));
    }
    let n = records.len();
    let (mut tp_left, mut fp_left) = (tp_total, fp_total);
    let point = |k: usize, tp_left: usize, fp_left: usize| CurvePoint {
        tau: k as f64 / n as f64,
        fp_norm: fp_left as f64 / fp_total as f64,
        tp_norm: tp_left as f64 / tp_total as f64,
    };
    let mut points = Vec::with_capacity(n + 1);
    points.push(point(0, tp_left, fp_left));
    for (k, &i) in removal_order(records).iter().enumerate() {
        if records[i].tp {
            tp_left -= 1;
        } else {
            fp_left -= 1;
        }
        points.push(point(k + 1, tp_left, fp_left));
    }
    // Consecutive points are monotone in fp_norm, so summing trapezoids along
    // the sweep equals integrating over fp_norm; vertical steps add nothing.
    let area: f64 = points
        .windows(2)
        .map(|w| 0.5 * (w[0].fp_norm - w[1].fp_norm) * (w[0].tp_norm + w[1].tp_norm))
        .sum();
    Ok((points, 100.0 * area))
}

/// Fractional ranks starting at 1; ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len()
            && values[order[end]].total_cmp(&values[order[start]]) == Ordering::Equal
        {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    // sqrt(x·x) == x exactly, so perfectly (anti-)monotone ranks give exactly ±1
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Evaluation(format!(
            "spearman: lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Evaluation("spearman needs at least 2 values".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Evaluation("spearman: NaN input".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
        .ok_or_else(|| Error::Evaluation("spearman: constant input".into()))
}

/// Ground truth for one lesion, shared by all methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub key: LesionKey,
    pub size: usize,
    pub tp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    /// Percent.
    pub auc: f64,
    pub spearman_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodResult>,
    pub dice: Vec<(String, f64)>,
    pub n_tp: usize,
    pub n_fp: usize,
}

impl EvalReport {
    pub fn auc(&self, method: &str) -> Option<f64> {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .map(|m| m.auc)
    }

    pub fn rho(&self, method: &str) -> Option<f64> {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .map(|m| m.spearman_rho)
    }

    /// Average AUC and ρ per method across folds; Dice lists and lesion
    /// counts are concatenated and summed.
    pub fn average(folds: &[EvalReport]) -> Result<EvalReport> {
        let first = folds
            .first()
            .ok_or_else(|| Error::Report("no fold reports to average".into()))?;
        let k = folds.len() as f64;
        let mut methods = Vec::new();
        for m in &first.methods {
            let (mut auc, mut rho) = (0.0, 0.0);
            for f in folds {
                let r = f
                    .methods
                    .iter()
                    .find(|x| x.method == m.method)
                    .ok_or_else(|| Error::Report(format!("fold lacks method {}", m.method)))?;
                auc += r.auc;
                rho += r.spearman_rho;
            }
            methods.push(MethodResult {
                method: m.method.clone(),
                auc: auc / k,
                spearman_rho: rho / k,
            });
        }
        Ok(EvalReport {
            methods,
            dice: folds.iter().flat_map(|f| f.dice.iter().cloned()).collect(),
            n_tp: folds.iter().map(|f| f.n_tp).sum(),
            n_fp: folds.iter().map(|f| f.n_fp).sum(),
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("method,auc_percent,spearman_rho\n");
        for m in &self.methods {
            writeln!(out, "{},{:.6},{:.6}", m.method, m.auc, m.spearman_rho).unwrap();
        }
        write_text(path.as_ref(), &out)
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("scan_id,dice\n");
        for (scan, d) in &self.dice {
            writeln!(out, "{scan},{d:.6}").unwrap();
        }
        writeln!(out, "# tp_lesions,{}", self.n_tp).unwrap();
        writeln!(out, "# fp_lesions,{}", self.n_fp).unwrap();
        write_text(path.as_ref(), &out)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct Curves(pub Vec<(String, Vec<CurvePoint>)>);

impl Curves {
    /// One `<method>.csv` per method with columns `tau,fp_norm,tp_norm`.
    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, points) in &self.0 {
            let mut out = String::from("tau,fp_norm,tp_norm\n");
            for p in points {
                writeln!(out, "{:.9},{:.9},{:.9}", p.tau, p.fp_norm, p.tp_norm).unwrap();
            }
            write_text(&dir.join(format!("{name}.csv")), &out)?;
        }
        Ok(())
    }

    /// Plain SVG line plot of TP fraction against FP fraction.
    pub fn to_svg(&self) -> String {
        const W: f64 = 480.0;
        const PAD: f64 = 40.0;
        const COLORS: [&str; 11] = [
            "#d62728", "#ff7f0e", "#1f77b4", "#aec7e8", "#2ca02c", "#98df8a", "#9467bd", "#c5b0d5",
            "#7f7f7f", "#8c564b", "#e377c2",
        ];
        let side = W - 2.0 * PAD;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" viewBox=\"0 0 {w} {w}\">\n\
             <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{side}\" height=\"{side}\" fill=\"none\" stroke=\"black\"/>\n\
             <text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\" font-size=\"12\">FP (normalized)</text>\n\
             <text x=\"12\" y=\"{cx}\" font-size=\"12\" transform=\"rotate(-90 12 {cx})\" text-anchor=\"middle\">TP (normalized)</text>\n",
            w = W + 160.0,
            cx = W / 2.0,
            by = W - 10.0,
        );
        for (i, (name, points)) in self.0.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let coords: Vec<String> = points
                .iter()
                .map(|p| {
                    format!(
                        "{:.2},{:.2}",
                        PAD + p.fp_norm * side,
                        PAD + (1.0 - p.tp_norm) * side
                    )
                })
                .collect();
            writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                coords.join(" ")
            )
            .unwrap();
            writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
                W - PAD + 50.0,
                PAD + 14.0 * i as f64
            )
            .unwrap();
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// AUC, ρ(uncertainty, size) and curve per method over a common lesion set.
pub fn build_report(
    lesions: &[LesionRecord],
    scores: &[(String, HashMap<LesionKey, f64>)],
    dice: &[(String, f64)],
) -> Result<(EvalReport, Curves)> {
    let sizes: Vec<f64> = lesions.iter().map(|l| l.size as f64).collect();
    let mut methods = Vec::with_capacity(scores.len());
    let mut curves = Vec::with_capacity(scores.len());
    for (name, by_key) in scores {
        let mut records = Vec::with_capacity(lesions.len());
        for l in lesions {
            let &u = by_key.get(&l.key).ok_or_else(|| {
                Error::Report(format!(
                    "method {name} has no score for lesion {}/{}",
                    l.key.scan_id, l.key.lesion_id
                ))
            })?;
            records.push(ScoredLesion {
                key: l.key.clone(),
                uncertainty: u,
                tp: l.tp,
            });
        }
        let (points, auc) = accuracy_confidence_curve(&records)?;
        let unc: Vec<f64> = records.iter().map(|r| r.uncertainty).collect();
        // a constant score has no rank correlation; report 0
        let rho = spearman_rho(&unc, &sizes).unwrap_or(0.0);
        methods.push(MethodResult {
            method: name.clone(),
            auc,
            spearman_rho: rho,
        });
        curves.push((name.clone(), points));
    }
    let n_tp = lesions.iter().filter(|l| l.tp).count();
    Ok((
        EvalReport {
            methods,
            dice: dice.to_vec(),
            n_tp,
            n_fp: lesions.len() - n_tp,
        },
        Curves(curves),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: u32, u: f64, tp: bool) -> ScoredLesion {
        ScoredLesion {
            key: LesionKey::new("s", id),
            uncertainty: u,
            tp,
        }
    }

    fn pts(points: &[CurvePoint]) -> Vec<(f64, f64)> {
        points.iter().map(|p| (p.fp_norm, p.tp_norm)).collect()
    }

    #[test]
    fn perfect_ranking() {
        let r = [
            rec(1, 0.1, true),
            rec(2, 0.2, true),
            rec(3, 0.8, false),
            rec(4, 0.9, false),
        ];
        let (points, auc) = accuracy_confidence_curve(&r).unwrap();
        assert_eq!(
            pts(&points),
            vec![(1.0, 1.0), (0.5, 1.0), (0.0, 1.0), (0.0, 0.5), (0.0, 0.0)]
        );
        assert_eq!(auc, 100.0);
    }

    #[test]
    fn inverted_ranking() {
        let r = [
            rec(1, 0.9, true),
            rec(2, 0.8, true),
            rec(3, 0.2, false),
            rec(4, 0.1, false),
        ];
        let (points, auc) = accuracy_confidence_curve(&r).unwrap();
        assert_eq!(
            pts(&points),
            vec![(1.0, 1.0), (1.0, 0.5), (1.0, 0.0), (0.5, 0.0), (0.0, 0.0)]
        );
        assert_eq!(auc, 0.0);
    }

    #[test]
    fn ties_follow_lesion_key() {
        // all tied: removal order is by id, so TP(1), FP(2), TP(3), FP(4)
        let r = [
            rec(3, 0.5, true),
            rec(1, 0.5, true),
            rec(4, 0.5, false),
            rec(2, 0.5, false),
        ];
        let (points, auc) = accuracy_confidence_curve(&r).unwrap();
        assert_eq!(
            pts(&points),
            vec![(1.0, 1.0), (1.0, 0.5), (0.5, 0.5), (0.5, 0.0), (0.0, 0.0)]
        );
        // trapezoids: 0.5·(0.5+0.5)·0.5 + 0.5·0.5·(0+0)... = 0.25
        assert!((auc - 25.0).abs() < 1e-12);
    }

    #[test]
    fn needs_both_classes() {
        let r = [rec(1, 0.1, true), rec(2, 0.2, true)];
        assert!(matches!(
            accuracy_confidence_curve(&r),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn spearman_cases() {
        let a = [1.0, 2.0, 3.0, 7.0];
        let inv: Vec<f64> = a.iter().map(|x| 1.0 / x).collect();
        assert_eq!(spearman_rho(&a, &inv).unwrap(), -1.0);
        assert_eq!(spearman_rho(&a, &a).unwrap(), 1.0);
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman_rho(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
    }

    #[test]
    fn report_requires_every_score() {
        let lesions = vec![
            LesionRecord {
                key: LesionKey::new("a", 1),
                size: 3,
                tp: true,
            },
            LesionRecord {
                key: LesionKey::new("a", 2),
                size: 5,
                tp: false,
            },
        ];
        let mut m = HashMap::new();
        m.insert(LesionKey::new("a", 1), 0.2);
        assert!(matches!(
            build_report(&lesions, &[("X".into(), m.clone())], &[]),
            Err(Error::Report(_))
        ));
        m.insert(LesionKey::new("a", 2), 0.7);
        let (rep, curves) =
            build_report(&lesions, &[("X".into(), m)], &[("a".into(), 0.8)]).unwrap();
        assert_eq!(rep.auc("X"), Some(100.0));
        assert_eq!(rep.rho("X"), Some(1.0));
        assert_eq!(curves.0[0].1[0].fp_norm, 1.0);
        assert!(curves.to_svg().contains("<polyline"));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::from_name(m.name()), Some(m));
        }
    }

    fn records_strategy() -> impl Strategy<Value = Vec<ScoredLesion>> {
        proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..40).prop_map(|v| {
            let mut r: Vec<ScoredLesion> = v
                .into_iter()
                .enumerate()
                .map(|(i, (u, tp))| rec(i as u32, u, tp))
                .collect();
            r[0].tp = true;
            r[1].tp = false;
            r
        })
    }

    proptest! {
        #[test]
        fn curve_is_monotone_and_rank_invariant(records in records_strategy()) {
            let (points, auc) = accuracy_confidence_curve(&records).unwrap();
            prop_assert_eq!((points[0].fp_norm, points[0].tp_norm), (1.0, 1.0));
            let last = points.last().unwrap();
            prop_assert_eq!((last.fp_norm, last.tp_norm), (0.0, 0.0));
            for w in points.windows(2) {
                prop_assert!(w[1].fp_norm <= w[0].fp_norm && w[1].tp_norm <= w[0].tp_norm);
            }
            prop_assert!((0.0..=100.0).contains(&auc));
            let transformed: Vec<ScoredLesion> = records
                .iter()
                .map(|r| ScoredLesion { uncertainty: r.uncertainty.exp() * 3.0 + 1.0, ..r.clone() })
                .collect();
            let (_, auc2) = accuracy_confidence_curve(&transformed).unwrap();
            prop_assert_eq!(auc.to_bits(), auc2.to_bits());
        }

        #[test]
        fn spearman_symmetric_and_rank_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 3..30),
            b_seed in proptest::collection::vec(-10.0f64..10.0, 30),
        ) {
            let b = &b_seed[..a.len()];
            if let (Ok(r1), Ok(r2)) = (spearman_rho(&a, b), spearman_rho(b, &a)) {
                prop_assert!((r1 - r2).abs() < 1e-12);
                let at: Vec<f64> = a.iter().map(|x| x.powi(3) + 2.0 * x).collect();
                let r3 = spearman_rho(&at, b).unwrap();
                prop_assert!((r1 - r3).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r1));
            }
        }
    }
}
