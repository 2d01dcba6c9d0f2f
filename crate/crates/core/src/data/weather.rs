use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherKind {
    Day,
    Fog,
    Snow,
    Night,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 4] = [Self::Day, Self::Fog, Self::Snow, Self::Night];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Day => "day",
            Self::Fog => "fog",
            Self::Snow => "snow",
            Self::Night => "night",
        }
    }
}

impl fmt::Display for WeatherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeatherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown weather kind `{s}` (expected day, fog, snow or night)")))
    }
}

/// Corrupts an RGB image (`N x 3 x H x W`, values in `[0, 1]`).
///
/// * fog: blend toward white with `alpha = 0.3 + 0.5 s`
/// * night: `v^(1 + 2 s) * (1 - 0.5 s)`
/// * snow: `50 + 450 s` white disks of radius 1 or 2 at random centres
pub fn weather_corrupt<R: Rng + ?Sized>(
    rgb: &Tensor<f32>,
    kind: WeatherKind,
    severity: f64,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Contract(format!("weather severity {severity} outside [0, 1]")));
    }
    let s = severity as f32;
    Ok(match kind {
        WeatherKind::Day => rgb.clone(),
        WeatherKind::Fog => {
            let alpha = 0.3 + 0.5 * s;
            rgb.map(|v| (1.0 - alpha) * v + alpha)
        }
        WeatherKind::Night => {
            let gamma = 1.0 + 2.0 * s;
            let scale = 1.0 - 0.5 * s;
            rgb.map(|v| v.max(0.0).powf(gamma) * scale)
        }
        WeatherKind::Snow => {
            let mut out = rgb.clone();
            let [n, c, h, w] = rgb.shape();
            let flakes = (50.0 + 450.0 * severity).round() as usize;
            for b in 0..n {
                for _ in 0..flakes {
                    let cy = rng.gen_range(0..h) as isize;
                    let cx = rng.gen_range(0..w) as isize;
                    let r: isize = rng.gen_range(1..=2);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (y, x) = (cy + dy, cx + dx);
                            if dy * dy + dx * dx > r * r || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                out.set([b, ch, y as usize, x as usize], 1.0);
                            }
                        }
                    }
                }
            }
            out
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fog_blends_toward_white() {
        let x = Tensor::full([1, 3, 2, 2], 0.2f32);
        let y = weather_corrupt(&x, WeatherKind::Fog, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.84).abs() < 1e-6));
    }

    #[test]
    fn degenerate_kinds_are_identity() {
        let x = Tensor::from_fn([1, 3, 4, 4], |[_, c, y, xx]| (c + y * 4 + xx) as f32 / 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(weather_corrupt(&x, WeatherKind::Day, 0.7, &mut rng).unwrap(), x);
        assert_eq!(weather_corrupt(&x, WeatherKind::Night, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn snow_only_whitens() {
        let x = Tensor::full([1, 3, 32, 32], 0.3f32);
        let y = weather_corrupt(&x, WeatherKind::Snow, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3 || v == 1.0));
        assert!(y.data().contains(&1.0));
    }

    #[test]
    fn unknown_kind_is_a_contract_error() {
        assert!(matches!("rain".parse::<WeatherKind>(), Err(Error::Contract(_))));
        assert!(weather_corrupt(&Tensor::zeros([1, 3, 1, 1]), WeatherKind::Fog, 1.5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
