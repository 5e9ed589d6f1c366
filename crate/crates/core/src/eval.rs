//! Dataset-aggregated mean intersection-over-union.

use crate::dataset::{Sample, TaskSource};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::segnet::UNet;
use crate::tensor::{IntMask, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        ConfusionAccumulator {
            num_classes,
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn accumulate(&mut self, pred: &IntMask, truth: &IntMask) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::shape(
                "accumulate",
                format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()),
            ));
        }
        let k = self.num_classes;
        for (what, m) in [("prediction", pred), ("truth", truth)] {
            let bad = m.data().iter().filter(|&&v| v as usize >= k).count();
            if bad > 0 {
                return Err(Error::LabelRange {
                    detail: format!("{what}: {bad} pixels with class >= {k}"),
                });
            }
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            let (p, t) = (p as usize, t as usize);
            self.union[p] += 1;
            if p == t {
                self.intersection[p] += 1;
            } else {
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    /// Sums counts of another accumulator over the same classes.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Config(format!(
                "cannot merge accumulators over {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for i in 0..self.num_classes {
            self.intersection[i] += other.intersection[i];
            self.union[i] += other.union[i];
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the union is empty.
    pub fn ious(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Center crop to the largest size the network accepts.
pub fn center_crop<T: Scalar>(sample: &Sample<T>, multiple: usize) -> Result<(Tensor<T>, IntMask)> {
    let (h, w) = (sample.height(), sample.width());
    let (nh, nw) = (h / multiple * multiple, w / multiple * multiple);
    if nh == 0 || nw == 0 {
        return Err(Error::shape(
            "evaluate",
            format!("{}: {h}x{w} is smaller than the size multiple {multiple}", sample.name),
        ));
    }
    if (nh, nw) == (h, w) {
        return Ok((sample.image.clone(), sample.mask.clone()));
    }
    let (oy, ox) = ((h - nh) / 2, (w - nw) / 2);
    let c = sample.image.shape()[0];
    let src = sample.image.data();
    let mut img = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        for y in 0..nh {
            let row = (ch * h + oy + y) * w + ox;
            img.extend_from_slice(&src[row..row + nw]);
        }
    }
    let m = sample.mask.data();
    let mut mask = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let row = (oy + y) * w + ox;
        mask.extend_from_slice(&m[row..row + nw]);
    }
    Ok((Tensor::new(vec![c, nh, nw], img)?, IntMask::new(vec![nh, nw], mask)?))
}

/// Predicted class mask for one sample (center-cropped), with the cropped truth.
pub fn predict_sample<T: Scalar>(
    net: &UNet,
    params: &ParamSet<T>,
    task: &str,
    sample: &Sample<T>,
) -> Result<(IntMask, IntMask)> {
    let (image, truth) = center_crop(sample, net.config.size_multiple())?;
    let s = image.shape().to_vec();
    let batch = image.reshape(vec![1, s[0], s[1], s[2]])?;
    let pred = net.predict(params, task, batch)?;
    let pred = pred.unstack().into_iter().next().expect("one image");
    Ok((pred, truth))
}

/// mIoU of `params` on the given samples of `task`.
pub fn evaluate_task<T: Scalar>(
    net: &UNet,
    params: &ParamSet<T>,
    task: &TaskSource<T>,
    indices: &[usize],
) -> Result<f64> {
    Ok(evaluate_accumulator(net, params, task, indices)?.miou()?)
}

pub fn evaluate_accumulator<T: Scalar>(
    net: &UNet,
    params: &ParamSet<T>,
    task: &TaskSource<T>,
    indices: &[usize],
) -> Result<ConfusionAccumulator> {
    if indices.is_empty() {
        return Err(Error::Config(format!("no samples to evaluate for task {}", task.id)));
    }
    let mut acc = ConfusionAccumulator::new(task.num_classes);
    for &i in indices {
        let sample = task
            .samples
            .get(i)
            .ok_or_else(|| Error::Config(format!("task {} has no sample {i}", task.id)))?;
        let (pred, truth) = predict_sample(net, params, &task.id, sample)?;
        acc.accumulate(&pred, &truth)?;
    }
    Ok(acc)
}
