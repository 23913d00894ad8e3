//! Checkpoints: segmenter parameters, optimizer momenta, epoch counter,
//! config hash, and metric history; save/load round-trips bit-identically.

use std::path::Path;

use crate::ndgrad::io;
use crate::segnet::SegNet;
use crate::synthworld::{CLASS_NAMES, NUM_CLASSES};
use crate::{Error, Real, Result, Tensor};

/// Per-epoch training record. Metric fields are -1 on epochs where the
/// evaluation pass did not run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: Real,
    pub source_ce: Real,
    pub target_term: Real,
    pub miou: Real,
    pub tail_iou: Real,
    pub per_class: Vec<Real>,
}

impl EpochMetrics {
    pub const FIELDS: usize = 6 + NUM_CLASSES;

    pub fn csv_header() -> String {
        let mut s = String::from("epoch,loss,source_ce,target_term,miou,tail_iou");
        for name in CLASS_NAMES {
            s.push_str(",iou_");
            s.push_str(name);
        }
        s
    }

    pub fn to_csv_row(&self) -> String {
        let mut s = format!(
            "{},{:.8},{:.8},{:.8},{:.6},{:.6}",
            self.epoch, self.loss, self.source_ce, self.target_term, self.miou, self.tail_iou
        );
        for v in &self.per_class {
            s.push_str(&format!(",{v:.6}"));
        }
        s
    }

    fn flat(&self) -> Vec<Real> {
        let mut v = vec![
            self.epoch as Real,
            self.loss,
            self.source_ce,
            self.target_term,
            self.miou,
            self.tail_iou,
        ];
        v.extend_from_slice(&self.per_class);
        v
    }

    fn unflat(row: &[Real]) -> EpochMetrics {
        EpochMetrics {
            epoch: row[0] as usize,
            loss: row[1],
            source_ce: row[2],
            target_term: row[3],
            miou: row[4],
            tail_iou: row[5],
            per_class: row[6..].to_vec(),
        }
    }
}

pub fn history_to_csv(history: &[EpochMetrics]) -> String {
    let mut out = EpochMetrics::csv_header();
    out.push('\n');
    for m in history {
        out.push_str(&m.to_csv_row());
        out.push('\n');
    }
    out
}

/// Parse a metrics CSV produced by [`history_to_csv`].
pub fn history_from_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("metrics csv: empty file".into()))?;
    if header != EpochMetrics::csv_header() {
        return Err(Error::Parse(format!("metrics csv: bad header {header:?}")));
    }
    lines
        .map(|line| {
            let fields: Vec<Real> = line
                .split(',')
                .map(|f| f.parse::<Real>().map_err(|_| Error::Parse(format!("bad field {f:?}"))))
                .collect::<Result<_>>()?;
            if fields.len() != EpochMetrics::FIELDS {
                return Err(Error::Parse(format!(
                    "metrics csv: expected {} fields, got {}",
                    EpochMetrics::FIELDS,
                    fields.len()
                )));
            }
            Ok(EpochMetrics::unflat(&fields))
        })
        .collect()
}

#[derive(Clone)]
pub struct Checkpoint {
    pub net: SegNet,
    /// One momentum buffer per parameter, in parameter order.
    pub momenta: Vec<Vec<Real>>,
    pub epoch: usize,
    pub config_hash: u64,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut items: Vec<(String, Tensor)> = Vec::new();
        items.push((
            "meta".to_string(),
            Tensor::from_vec(
                vec![
                    self.epoch as Real,
                    (self.config_hash >> 32) as Real,
                    (self.config_hash & 0xffff_ffff) as Real,
                    self.history.len() as Real,
                ],
                &[4],
            )?,
        ));
        for (name, t) in SegNet::param_names().iter().zip(self.net.params()) {
            items.push((format!("param/{name}"), t.clone()));
        }
        for (name, m) in SegNet::param_names().iter().zip(&self.momenta) {
            items.push((
                format!("mom/{name}"),
                Tensor::from_vec(m.clone(), &[m.len()])?,
            ));
        }
        if !self.history.is_empty() {
            let rows = self.history.len();
            let flat: Vec<Real> = self.history.iter().flat_map(|m| m.flat()).collect();
            items.push((
                "history".to_string(),
                Tensor::from_vec(flat, &[rows, EpochMetrics::FIELDS])?,
            ));
        }
        io::save_container(path, &items)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let items = io::load_container(path)?;
        let get = |name: &str| -> Result<&Tensor> {
            items
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Parse(format!("checkpoint missing {name}")))
        };
        let meta = get("meta")?;
        let epoch = meta.data()[0] as usize;
        let config_hash = ((meta.data()[1] as u64) << 32) | (meta.data()[2] as u64);
        let hist_len = meta.data()[3] as usize;
        let mut net = SegNet::zeros(NUM_CLASSES);
        for (name, slot) in SegNet::param_names().iter().zip(net.params_mut()) {
            let t = get(&format!("param/{name}"))?;
            *slot = Tensor::param(t.data().to_vec(), slot.shape())?;
        }
        let momenta = SegNet::param_names()
            .iter()
            .map(|name| Ok(get(&format!("mom/{name}"))?.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let history = if hist_len > 0 {
            let h = get("history")?;
            h.data()
                .chunks(EpochMetrics::FIELDS)
                .map(EpochMetrics::unflat)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Checkpoint {
            net,
            momenta,
            epoch,
            config_hash,
            history,
        })
    }
}
