//! Accuracy bookkeeping and the two retention ratios, plus feature export
//! for offline visualization.

use std::collections::BTreeMap;
use std::io::Write;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::numkit::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelTag {
    Local,
    Global,
}

impl ModelTag {
    fn name(self) -> &'static str {
        match self {
            ModelTag::Local => "local",
            ModelTag::Global => "global",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AccKey {
    pub model: ModelTag,
    pub client: usize,
    pub task: usize,
    pub round: usize,
}

/// Keyed accuracy records; one value per (model, client, task, round).
#[derive(Clone, Debug, Default)]
pub struct AccuracyTable {
    records: BTreeMap<AccKey, f64>,
}

impl AccuracyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: AccKey, value: f64) -> Result<()> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidParam {
                name: "accuracy",
                reason: format!("must lie in [0, 1], got {value}"),
            });
        }
        if self.records.contains_key(&key) {
            return Err(Error::InvalidParam {
                name: "accuracy record",
                reason: format!("duplicate key {key:?}"),
            });
        }
        self.records.insert(key, value);
        Ok(())
    }

    pub fn get(&self, key: AccKey) -> Result<f64> {
        self.records.get(&key).copied().ok_or(Error::MissingRecord {
            model: key.model.name(),
            client: key.client,
            task: key.task,
            round: key.round,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Fraction of correct predictions over the given sample indices.
pub fn evaluate<F>(mut predict: F, dataset: &Dataset, indices: &[usize]) -> Result<f64>
where
    F: FnMut(&Vector) -> Result<u32>,
{
    if indices.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut hits = 0usize;
    for &i in indices {
        let s = dataset.sample(i);
        if predict(&s.features)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Mean over clients of first-task accuracy now versus right after that task
/// was learned. 1 means nothing forgotten over time.
pub fn kr_temporal(table: &AccuracyTable, clients: usize, round: usize) -> Result<f64> {
    if clients == 0 {
        return Err(Error::EmptyInput("clients"));
    }
    let mut total = 0.0;
    for client in 0..clients {
        let baseline = table.get(AccKey {
            model: ModelTag::Local,
            client,
            task: 0,
            round: 0,
        })?;
        if baseline <= 0.0 {
            return Err(Error::InvalidParam {
                name: "kr_temporal",
                reason: format!("client {client} first-task baseline accuracy is zero"),
            });
        }
        let now = table.get(AccKey {
            model: ModelTag::Local,
            client,
            task: 0,
            round,
        })?;
        total += now / baseline;
    }
    Ok(total / clients as f64)
}

/// Mean over clients of the global model's accuracy on the current task
/// versus the local model's. 1 means aggregation cost nothing locally.
pub fn kr_spatial(table: &AccuracyTable, clients: usize, round: usize, task: usize) -> Result<f64> {
    if clients == 0 {
        return Err(Error::EmptyInput("clients"));
    }
    let mut total = 0.0;
    for client in 0..clients {
        let local = table.get(AccKey {
            model: ModelTag::Local,
            client,
            task,
            round,
        })?;
        if local <= 0.0 {
            return Err(Error::InvalidParam {
                name: "kr_spatial",
                reason: format!("client {client} local accuracy is zero at round {round}"),
            });
        }
        let global = table.get(AccKey {
            model: ModelTag::Global,
            client,
            task,
            round,
        })?;
        total += global / local;
    }
    Ok(total / clients as f64)
}

pub struct FeatureRow {
    pub sample_id: u64,
    pub label: u32,
    pub round: usize,
    pub feature: Vector,
}

/// CSV rows `sample_id,label,round,f_1..f_d`. Floats are written with the
/// shortest representation that parses back to the same bits.
pub fn export_features<W: Write>(mut out: W, dim: usize, rows: &[FeatureRow]) -> Result<()> {
    let mut header = String::from("sample_id,label,round");
    for i in 1..=dim {
        header.push_str(&format!(",f_{i}"));
    }
    writeln!(out, "{header}")?;
    for row in rows {
        if row.feature.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.feature.dim(),
            });
        }
        let mut line = format!("{},{},{}", row.sample_id, row.label, row.round);
        for v in row.feature.as_slice() {
            line.push_str(&format!(",{v}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::synth_gaussian_dataset;

    fn key(model: ModelTag, client: usize, task: usize, round: usize) -> AccKey {
        AccKey {
            model,
            client,
            task,
            round,
        }
    }

    #[test]
    fn table_rejects_out_of_range_and_duplicates() {
        let mut t = AccuracyTable::new();
        assert!(t.insert(key(ModelTag::Local, 0, 0, 0), 1.5).is_err());
        assert!(t.insert(key(ModelTag::Local, 0, 0, 0), -0.1).is_err());
        t.insert(key(ModelTag::Local, 0, 0, 0), 0.5).unwrap();
        assert!(t.insert(key(ModelTag::Local, 0, 0, 0), 0.5).is_err());
        assert_eq!(t.get(key(ModelTag::Local, 0, 0, 0)).unwrap(), 0.5);
        assert!(matches!(
            t.get(key(ModelTag::Global, 0, 0, 0)),
            Err(Error::MissingRecord { .. })
        ));
    }

    #[test]
    fn evaluate_counts_hits() {
        let ds = synth_gaussian_dataset(2, 5, 4, 0.01, 3).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        // always predict class 0: half the samples are class 0
        let acc = evaluate(|_| Ok(0), &ds, &idx).unwrap();
        assert_eq!(acc, 0.5);
        let perfect = evaluate(
            |x| {
                // nearest of the two class means by brute force
                let mut best = (0u32, f64::INFINITY);
                for c in 0..2u32 {
                    let members: Vec<&crate::datagen::LabeledSample> =
                        ds.samples().iter().filter(|s| s.label == c).collect();
                    let mut mean = Vector::zeros(4);
                    for m in &members {
                        mean.add_scaled(&m.features, 1.0 / members.len() as f64).unwrap();
                    }
                    let mut diff = mean.clone();
                    diff.add_scaled(x, -1.0).unwrap();
                    let dist = diff.norm();
                    if dist < best.1 {
                        best = (c, dist);
                    }
                }
                Ok(best.0)
            },
            &ds,
            &idx,
        )
        .unwrap();
        assert_eq!(perfect, 1.0);
        assert!(evaluate(|_| Ok(0), &ds, &[]).is_err());
    }

    #[test]
    fn temporal_retention_matches_hand_arithmetic() {
        let mut t = AccuracyTable::new();
        t.insert(key(ModelTag::Local, 0, 0, 0), 0.8).unwrap();
        t.insert(key(ModelTag::Local, 1, 0, 0), 0.8).unwrap();
        t.insert(key(ModelTag::Local, 0, 0, 3), 0.8).unwrap();
        t.insert(key(ModelTag::Local, 1, 0, 3), 0.4).unwrap();
        // (0.8/0.8 + 0.4/0.8) / 2
        assert_eq!(kr_temporal(&t, 2, 3).unwrap(), 0.75);
        assert_eq!(kr_temporal(&t, 2, 0).unwrap(), 1.0);
    }

    #[test]
    fn spatial_retention_matches_hand_arithmetic() {
        let mut t = AccuracyTable::new();
        t.insert(key(ModelTag::Local, 0, 2, 2), 0.9).unwrap();
        t.insert(key(ModelTag::Local, 1, 2, 2), 0.9).unwrap();
        t.insert(key(ModelTag::Global, 0, 2, 2), 0.9).unwrap();
        t.insert(key(ModelTag::Global, 1, 2, 2), 0.45).unwrap();
        // (0.9/0.9 + 0.45/0.9) / 2
        assert_eq!(kr_spatial(&t, 2, 2, 2).unwrap(), 0.75);
    }

    #[test]
    fn retention_errors_on_missing_or_zero_records() {
        let mut t = AccuracyTable::new();
        t.insert(key(ModelTag::Local, 0, 0, 0), 0.0).unwrap();
        assert!(kr_temporal(&t, 1, 0).is_err());
        let t2 = AccuracyTable::new();
        assert!(matches!(
            kr_temporal(&t2, 1, 0),
            Err(Error::MissingRecord { .. })
        ));
    }

    #[test]
    fn feature_export_round_trips() {
        let rows = vec![
            FeatureRow {
                sample_id: 3,
                label: 1,
                round: 2,
                feature: Vector::new(vec![0.1, -2.5e-7, 3.0]).unwrap(),
            },
            FeatureRow {
                sample_id: 4,
                label: 0,
                round: 2,
                feature: Vector::new(vec![1.0 / 3.0, 0.2, 0.30000000000000004]).unwrap(),
            },
        ];
        let mut buf = Vec::new();
        export_features(&mut buf, 3, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "sample_id,label,round,f_1,f_2,f_3");
        for (line, row) in lines.zip(&rows) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], row.sample_id.to_string());
            assert_eq!(fields[1], row.label.to_string());
            assert_eq!(fields[2], row.round.to_string());
            for (f, want) in fields[3..].iter().zip(row.feature.as_slice()) {
                assert_eq!(f.parse::<f64>().unwrap().to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn empty_export_is_header_only() {
        let mut buf = Vec::new();
        export_features(&mut buf, 2, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "sample_id,label,round,f_1,f_2\n");
    }
}
