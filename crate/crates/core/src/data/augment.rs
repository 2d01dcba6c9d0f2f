use rand::Rng;

use super::SamplePair;

/// One draw of the training augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
}

impl AugmentDraw {
    pub const IDENTITY: Self = Self {
        flip: false,
        brightness: 1.0,
        contrast: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip: rng.gen_bool(0.5),
            brightness: rng.gen_range(0.8..1.2),
            contrast: rng.gen_range(0.8..1.2),
        }
    }

    /// Flip is applied to all three images; brightness and contrast touch
    /// RGB only.
    pub fn apply(&self, pair: &SamplePair) -> SamplePair {
        let mut out = pair.clone();
        if self.flip {
            for t in [&mut out.rgb, &mut out.ir, &mut out.gt] {
                let w = t.width();
                for row in t.data_mut().chunks_exact_mut(w) {
                    row.reverse();
                }
            }
        }
        if self.brightness != 1.0 {
            let b = self.brightness;
            out.rgb.data_mut().iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
        }
        if self.contrast != 1.0 {
            let mean = out.rgb.mean();
            let c = self.contrast;
            out.rgb
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = (mean + c * (*v - mean)).clamp(0.0, 1.0));
        }
        out
    }
}

pub fn augment_train<R: Rng + ?Sized>(pair: &SamplePair, rng: &mut R) -> SamplePair {
    AugmentDraw::sample(rng).apply(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pair() -> SamplePair {
        SamplePair::new(
            "p",
            Tensor::from_fn([1, 3, 2, 3], |[_, c, y, x]| 0.1 * (c + y + x) as f32 + 0.1),
            Tensor::from_fn([1, 1, 2, 3], |[_, _, y, x]| 0.2 * (y + x) as f32),
            Tensor::from_fn([1, 1, 2, 3], |[_, _, _, x]| if x == 0 { 1.0 } else { 0.0 }),
        )
        .unwrap()
    }

    #[test]
    fn identity_draw_changes_nothing() {
        let p = pair();
        assert_eq!(AugmentDraw::IDENTITY.apply(&p), p);
    }

    #[test]
    fn flip_mirrors_every_modality() {
        let p = pair();
        let q = AugmentDraw { flip: true, ..AugmentDraw::IDENTITY }.apply(&p);
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(q.gt.at([0, 0, y, x]), p.gt.at([0, 0, y, 2 - x]));
                assert_eq!(q.ir.at([0, 0, y, x]), p.ir.at([0, 0, y, 2 - x]));
            }
        }
    }

    #[test]
    fn brightness_clips() {
        let mut p = pair();
        p.rgb.data_mut()[0] = 0.9;
        let q = AugmentDraw { brightness: 1.2, ..AugmentDraw::IDENTITY }.apply(&p);
        assert_eq!(q.rgb.data()[0], 1.0);
        assert_eq!(q.gt, p.gt);
        assert_eq!(q.ir, p.ir);
    }
}
