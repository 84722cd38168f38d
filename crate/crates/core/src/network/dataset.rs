use crate::error::{Error, Result};
use crate::model::{MultiEchoSignal, ParameterMaps};
use crate::network::encoding::normalize;

/// One normalised 2D slice.
#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub signal: MultiEchoSignal,
    /// Factor that was divided out of the raw signal.
    pub scale: f64,
    /// Reference maps in physical units.
    pub reference: Option<ParameterMaps>,
    pub mask: Vec<bool>,
}

impl DatasetItem {
    pub fn new(raw: &MultiEchoSignal, reference: Option<ParameterMaps>) -> Result<Self> {
        let g = raw.grid();
        if g.slices != 1 {
            return Err(Error::Geometry(format!("dataset items are single slices, got {}", g.slices)));
        }
        if let Some(r) = &reference {
            r.check_grid(g)?;
        }
        let mask = raw.mask();
        let (signal, scale) = normalize(raw);
        Ok(Self { signal, scale, reference, mask })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Dataset {
    /// Every slice starts in the training split.
    pub fn new(items: Vec<DatasetItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        let first = &items[0].signal;
        for it in &items {
            if it.signal.grid() != first.grid() || it.signal.params.echo_times != first.params.echo_times {
                return Err(Error::Geometry("dataset slices differ in size or protocol".into()));
            }
        }
        let train = (0..items.len()).collect();
        Ok(Self { items, train, validation: Vec::new() })
    }

    pub fn from_slices(signals: &[MultiEchoSignal], references: Option<&[ParameterMaps]>) -> Result<Self> {
        if let Some(r) = references {
            if r.len() != signals.len() {
                return Err(Error::InvalidInput(format!("{} signals but {} references", signals.len(), r.len())));
            }
        }
        let items = signals
            .iter()
            .enumerate()
            .map(|(i, s)| DatasetItem::new(s, references.map(|r| r[i].clone())))
            .collect::<Result<_>>()?;
        Self::new(items)
    }

    /// Splits a multi-slice volume (and matching reference maps) into items.
    pub fn from_volume(signal: &MultiEchoSignal, reference: Option<&ParameterMaps>) -> Result<Self> {
        let slices = signal.grid().slices;
        let signals = (0..slices).map(|s| signal.slice(s)).collect::<Result<Vec<_>>>()?;
        let refs = reference
            .map(|r| {
                r.check_grid(signal.grid())?;
                (0..slices).map(|s| r.slice(s)).collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        Self::from_slices(&signals, refs.as_deref())
    }

    /// The first `train_count` slices train, the rest validate.
    pub fn split_at(mut self, train_count: usize) -> Result<Self> {
        if train_count == 0 || train_count > self.items.len() {
            return Err(Error::Config(format!("cannot train on {train_count} of {} slices", self.items.len())));
        }
        self.train = (0..train_count).collect();
        self.validation = (train_count..self.items.len()).collect();
        Ok(self)
    }

    /// Training share rounded to whole slices.
    pub fn split_fraction(self, train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1]")));
        }
        let n = ((self.items.len() as f64 * train_fraction).round() as usize).max(1);
        self.split_at(n)
    }

    pub fn train_fraction(&self) -> f64 {
        self.train.len() as f64 / self.items.len() as f64
    }

    pub fn has_references(&self) -> bool {
        self.items.iter().all(|i| i.reference.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AcquisitionParams, GridShape};
    use crate::phantom::random_corpus;

    fn corpus(n: usize) -> (Vec<MultiEchoSignal>, Vec<ParameterMaps>) {
        let p = AcquisitionParams::default_protocol(GridShape::plane(8, 8));
        let ph = random_corpus(n, 8, 4, &p, (-50.0, 50.0), 0.0).unwrap();
        (ph.iter().map(|x| x.signal.clone()).collect(), ph.into_iter().map(|x| x.truth).collect())
    }

    #[test]
    fn eighty_twenty_split() {
        let (s, r) = corpus(10);
        let d = Dataset::from_slices(&s, Some(&r)).unwrap().split_fraction(0.8).unwrap();
        assert_eq!((d.train.len(), d.validation.len()), (8, 2));
        assert_eq!(d.train_fraction(), 0.8);
        assert!(d.has_references());
    }

    #[test]
    fn items_are_normalised() {
        let (s, _) = corpus(2);
        let d = Dataset::from_slices(&s.iter().map(|x| x.scaled(7.0)).collect::<Vec<_>>(), None).unwrap();
        for it in &d.items {
            assert!((it.signal.max_first_echo() - 1.0).abs() < 1e-12);
            assert!(it.scale > 0.0);
        }
        assert!(!d.has_references());
    }

    #[test]
    fn volume_split_into_slices() {
        let (s, r) = corpus(3);
        let g = GridShape::new(8, 8, 3);
        let mut data = vec![num_complex::Complex64::new(0.0, 0.0); g.voxels() * 6];
        for (k, sl) in s.iter().enumerate() {
            for rr in 0..8 {
                for c in 0..8 {
                    let dst = g.index(rr, c, k) * 6;
                    data[dst..dst + 6].copy_from_slice(sl.voxel(rr * 8 + c));
                }
            }
        }
        let vol = MultiEchoSignal::new(data, s[0].params.with_grid(g)).unwrap();
        let stacked = ParameterMaps::stack(&r).unwrap();
        let d = Dataset::from_volume(&vol, Some(&stacked)).unwrap();
        assert_eq!(d.items.len(), 3);
        assert_eq!(d.items[2].reference.as_ref().unwrap(), &r[2]);
    }

    #[test]
    fn mismatched_references_rejected() {
        let (s, r) = corpus(3);
        assert!(Dataset::from_slices(&s, Some(&r[..2])).is_err());
        assert!(Dataset::from_slices(&s, None).unwrap().split_at(0).is_err());
    }
}
