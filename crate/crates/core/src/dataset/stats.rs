//! Summary statistics written next to a manifest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pairs: usize,
    pub references: usize,
    /// Pairs with y exactly one half.
    pub ties: usize,
    /// Count per distinct label value, keyed by the value printed to 6 places.
    pub label_histogram: BTreeMap<String, usize>,
    /// |psnr_0 - psnr_1| in dB.
    pub psnr_gap_histogram: Vec<HistogramBin>,
    pub voters: Vec<String>,
    /// Fraction of pairs (where both voted) on which voter i and j cast the same vote.
    pub agreement: Vec<Vec<f64>>,
    pub mean_label: f64,
}

const GAP_BINS: usize = 10;

impl DatasetStats {
    pub fn from_manifest(m: &DatasetManifest) -> Self {
        let n = m.records.len();
        let mut labels = BTreeMap::new();
        let mut ties = 0;
        let mut refs = std::collections::BTreeSet::new();
        for r in &m.records {
            *labels.entry(format!("{:.6}", r.y)).or_insert(0) += 1;
            ties += usize::from(r.y == 0.5);
            refs.insert(r.reference_id.as_str());
        }

        let delta = m.header.sampler.delta_db;
        let width = delta / GAP_BINS as f64;
        let mut gaps: Vec<HistogramBin> = (0..GAP_BINS)
            .map(|i| HistogramBin {
                lo: i as f64 * width,
                hi: (i + 1) as f64 * width,
                count: 0,
            })
            .collect();
        for r in &m.records {
            let g = (r.psnr_0 - r.psnr_1).abs();
            let k = ((g / width) as usize).min(GAP_BINS - 1);
            gaps[k].count += 1;
        }

        let voters = m.header.voters.clone();
        let k = voters.len();
        let mut same = vec![vec![0usize; k]; k];
        let mut both = vec![vec![0usize; k]; k];
        for r in &m.records {
            let votes: Vec<Option<u8>> = voters
                .iter()
                .map(|v| {
                    r.vote_result
                        .per_voter
                        .iter()
                        .find(|pv| &pv.voter == v)
                        .map(|pv| pv.vote)
                })
                .collect();
            for i in 0..k {
                for j in 0..k {
                    if let (Some(a), Some(b)) = (votes[i], votes[j]) {
                        both[i][j] += 1;
                        same[i][j] += usize::from(a == b);
                    }
                }
            }
        }
        let agreement = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        if both[i][j] == 0 {
                            f64::NAN
                        } else {
                            same[i][j] as f64 / both[i][j] as f64
                        }
                    })
                    .collect()
            })
            .collect();

        Self {
            pairs: n,
            references: refs.len(),
            ties,
            label_histogram: labels,
            psnr_gap_histogram: gaps,
            voters,
            agreement,
            mean_label: if n == 0 {
                f64::NAN
            } else {
                m.records.iter().map(|r| r.y).sum::<f64>() / n as f64
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}
