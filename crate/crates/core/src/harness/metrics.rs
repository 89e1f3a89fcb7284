use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Intersection and union counts per class, accumulated over images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    /// Adds one prediction/ground-truth pair; pixels whose ground truth is `ignore` are skipped.
    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask, ignore: u32) {
        assert_eq!(
            (pred.height(), pred.width()),
            (gt.height(), gt.width()),
            "prediction and ground truth differ in size"
        );
        let k = self.union.len();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p == g {
                if g < k {
                    self.intersection[g] += 1;
                    self.union[g] += 1;
                }
            } else {
                if p < k {
                    self.union[p] += 1;
                }
                if g < k {
                    self.union[g] += 1;
                }
            }
        }
    }

    /// Per-class IoU (0 where the union is empty) and the mean over classes with a nonempty union.
    pub fn finish(&self) -> (Tensor<f64>, f64) {
        let k = self.union.len();
        let per_class = Tensor::from_fn(&[k], |c| {
            if self.union[c] == 0 {
                0.0
            } else {
                self.intersection[c] as f64 / self.union[c] as f64
            }
        });
        let present: Vec<usize> = (0..k).filter(|&c| self.union[c] > 0).collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|&c| per_class.data()[c]).sum::<f64>() / present.len() as f64
        };
        (per_class, miou)
    }
}

/// IoU per class and mean IoU for one prediction.
pub fn miou(pred: &LabelMask, gt: &LabelMask, classes: usize, ignore: u32) -> (Tensor<f64>, f64) {
    let mut c = IouCounts::new(classes);
    c.add(pred, gt, ignore);
    c.finish()
}
