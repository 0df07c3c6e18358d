//! Classification metrics: confusion matrix, accuracy, per-class
//! recall/precision/F, support-weighted averages and one-vs-rest ROC.
//!
//! Class labels are the 1-based type numbers; the matrix is indexed
//! `[actual][predicted]` with 0-based class indices.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelType, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[actual][predicted]`.
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

fn class_index(label: usize) -> Result<usize> {
    if (1..=NUM_CLASSES).contains(&label) {
        Ok(label - 1)
    } else {
        Err(Error::InvalidData(format!("label {label} outside 1..={NUM_CLASSES}")))
    }
}

/// Tally predicted against actual 1-based labels.
pub fn confusion(predicted: &[usize], actual: &[usize]) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        cm.counts[class_index(a)?][class_index(p)?] += 1;
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    /// Row sum: samples whose actual class is `k`.
    pub fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    /// Column sum: samples predicted as `k`.
    pub fn predicted_count(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("actual\\predicted");
        for k in LabelType::ALL {
            write!(s, ",{}", k.number()).unwrap();
        }
        s.push('\n');
        for (k, row) in LabelType::ALL.iter().zip(&self.counts) {
            write!(s, "{}", k.number()).unwrap();
            for c in row {
                write!(s, ",{c}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// A ratio with an empty denominator: reported as 0.0 with this flag set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    RecallZeroDivision,
    PrecisionZeroDivision,
    AucUndefined,
}

/// A fraction that may have been forced to zero by an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub zero_division: bool,
}

fn ratio(num: u64, den: u64) -> Ratio {
    if den == 0 {
        Ratio {
            value: 0.0,
            zero_division: true,
        }
    } else {
        Ratio {
            value: num as f64 / den as f64,
            zero_division: false,
        }
    }
}

/// Correctly classified samples over all samples.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::InvalidData("accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / n as f64)
}

/// Diagonal over the row sum of class `k` (0-based).
pub fn recall(cm: &ConfusionMatrix, k: usize) -> Ratio {
    ratio(cm.counts[k][k], cm.support(k))
}

/// Diagonal over the column sum of class `k` (0-based).
pub fn precision(cm: &ConfusionMatrix, k: usize) -> Ratio {
    ratio(cm.counts[k][k], cm.predicted_count(k))
}

/// Weighted harmonic mean of precision and recall; `beta = 1` is F1.
pub fn f_beta(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / den
    }
}

/// Support-weighted mean `sum(n_i / N * m_i)`.
pub fn weighted(values: &[f64], supports: &[u64]) -> Result<f64> {
    if values.len() != supports.len() {
        return Err(Error::InvalidArgument(format!(
            "{} values for {} supports",
            values.len(),
            supports.len()
        )));
    }
    let n: u64 = supports.iter().sum();
    if n == 0 {
        return Err(Error::InvalidData("weighted average with zero total support".into()));
    }
    let n = n as f64;
    Ok(values.iter().zip(supports).map(|(&m, &s)| s as f64 / n * m).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive. The `(0, 0)` anchor uses
    /// `+inf`, serialized as `null`.
    #[serde(with = "inf_as_null")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC of `scores` against binary `positive` labels, sweeping the distinct
/// scores in descending order. Tied scores move in one step.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score in ROC input".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidData(format!(
            "ROC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint {
            threshold: thr,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// One-vs-rest ROC for class `k` (0-based) from per-sample probability rows
/// and 1-based actual labels.
pub fn roc_one_vs_rest(probs: &[[f64; NUM_CLASSES]], actual: &[usize], k: usize) -> Result<RocCurve> {
    let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
    let positive = actual
        .iter()
        .map(|&a| class_index(a).map(|i| i == k))
        .collect::<Result<Vec<_>>>()?;
    roc_curve(&scores, &positive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// 1-based type number.
    pub class: usize,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub fbeta: f64,
    pub auc: Option<f64>,
    pub flags: Vec<MetricFlag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub recall: f64,
    pub precision: f64,
    pub fbeta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub total: u64,
    pub beta: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted: WeightedMetrics,
    pub confusion: ConfusionMatrix,
    /// One-vs-rest curves, present when scores were supplied.
    #[serde(skip)]
    pub roc: Vec<Option<RocCurve>>,
}

/// Assemble every metric for `cm`. `scores` pairs per-sample probability
/// rows with 1-based actual labels; AUC is skipped without them.
pub fn report(cm: &ConfusionMatrix, scores: Option<(&[[f64; NUM_CLASSES]], &[usize])>, beta: f64) -> Result<MetricsReport> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let acc = accuracy(cm)?;
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut roc = Vec::with_capacity(NUM_CLASSES);
    for k in 0..NUM_CLASSES {
        let r = recall(cm, k);
        let p = precision(cm, k);
        let mut flags = Vec::new();
        if r.zero_division {
            flags.push(MetricFlag::RecallZeroDivision);
        }
        if p.zero_division {
            flags.push(MetricFlag::PrecisionZeroDivision);
        }
        let curve = match scores {
            Some((probs, actual)) => match roc_one_vs_rest(probs, actual, k) {
                Ok(c) => Some(c),
                Err(Error::InvalidData(_)) => {
                    flags.push(MetricFlag::AucUndefined);
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        per_class.push(ClassMetrics {
            class: k + 1,
            support: cm.support(k),
            precision: p.value,
            recall: r.value,
            fbeta: f_beta(p.value, r.value, beta),
            auc: curve.as_ref().map(|c| c.auc),
            flags,
        });
        roc.push(curve);
    }
    let supports: Vec<u64> = per_class.iter().map(|c| c.support).collect();
    let pick = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).collect::<Vec<_>>();
    let weighted = WeightedMetrics {
        recall: weighted(&pick(|c| c.recall), &supports)?,
        precision: weighted(&pick(|c| c.precision), &supports)?,
        fbeta: weighted(&pick(|c| c.fbeta), &supports)?,
    };
    Ok(MetricsReport {
        accuracy: acc,
        total: cm.total(),
        beta,
        per_class,
        weighted,
        confusion: *cm,
        roc,
    })
}

/// Percentage rounded half-up to one decimal.
pub fn percent_1dp(x: f64) -> f64 {
    (x * 1000.0 + 0.5).floor() / 10.0
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table: one row per class, then weighted and accuracy rows.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<18} {:>8} {:>10} {:>8} {:>8}", "Type", "Recall", "Precision", "F-score", "AUC").unwrap();
        for (c, label) in self.per_class.iter().zip(LabelType::ALL) {
            let auc = c.auc.map_or("-".to_string(), |a| format!("{:.3}", a));
            writeln!(
                s,
                "{:<18} {:>8.1} {:>10.1} {:>8.1} {:>8}",
                label.to_string(),
                percent_1dp(c.recall),
                percent_1dp(c.precision),
                percent_1dp(c.fbeta),
                auc
            )
            .unwrap();
        }
        writeln!(
            s,
            "{:<18} {:>8.1} {:>10.1} {:>8.1}",
            "Weighted",
            percent_1dp(self.weighted.recall),
            percent_1dp(self.weighted.precision),
            percent_1dp(self.weighted.fbeta)
        )
        .unwrap();
        writeln!(s, "Test accuracy {:.1} (n = {})", percent_1dp(self.accuracy), self.total).unwrap();
        s
    }

    /// `class,threshold,fpr,tpr` rows for every available curve.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("class,threshold,fpr,tpr\n");
        for (k, curve) in self.roc.iter().enumerate() {
            for p in curve.iter().flat_map(|c| &c.points) {
                writeln!(s, "{},{},{},{}", k + 1, p.threshold, p.fpr, p.tpr).unwrap();
            }
        }
        s
    }

    /// Write `metrics.json`, `confusion.csv`, `roc.csv` and `table.txt`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("metrics.json", self.to_json()?),
            ("confusion.csv", self.confusion.to_csv()),
            ("roc.csv", self.roc_csv()),
            ("table.txt", self.to_table()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
