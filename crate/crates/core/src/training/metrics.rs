use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// gold occurrences among scored utterances
    pub support: usize,
}

/// Classification quality of one task.
///
/// Utterances whose gold label is the ignored class are not scored, and the
/// ignored class is left out of every average. Predictions of the ignored
/// class on other utterances still count as misses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub scored: usize,
    pub ignored_label: Option<String>,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl TaskMetrics {
    pub fn compute(gold: &[usize], pred: &[usize], labels: &[String], ignore: Option<usize>) -> Self {
        assert_eq!(gold.len(), pred.len(), "gold and predictions differ in length");
        let k = labels.len();
        let (mut tp, mut fp, mut fnn) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
        let mut scored = 0;
        let mut correct = 0;
        for (&g, &p) in gold.iter().zip(pred) {
            if Some(g) == ignore {
                continue;
            }
            scored += 1;
            if g == p {
                tp[g] += 1;
                correct += 1;
            } else {
                fnn[g] += 1;
                fp[p] += 1;
            }
        }
        let mut per_class = Vec::with_capacity(k);
        let (mut sp, mut sr, mut sf, mut wf, mut counted) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for c in 0..k {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fnn[c]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let support = tp[c] + fnn[c];
            if Some(c) != ignore {
                sp += precision;
                sr += recall;
                sf += f1;
                wf += f1 * support as f64;
                counted += 1;
            }
            per_class.push(ClassMetrics {
                label: labels[c].clone(),
                precision,
                recall,
                f1,
                support,
            });
        }
        let n = counted.max(1) as f64;
        TaskMetrics {
            macro_precision: sp / n,
            macro_recall: sr / n,
            macro_f1: sf / n,
            weighted_f1: if scored == 0 { 0.0 } else { wf / scored as f64 },
            accuracy: ratio(correct, scored),
            scored,
            ignored_label: ignore.map(|c| labels[c].clone()),
            per_class,
        }
    }
}
