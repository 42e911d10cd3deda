use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine interpolation from `start` at `t = 0` to `end` at `t = total`:
/// `end + 0.5·(start − end)·(1 + cos(π·t/total))`.
pub fn cosine_value(t: usize, start: f64, end: f64, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs total steps >= 1".into()));
    }
    if t > total {
        return Err(Error::InvalidArgument(format!("step {t} is past the schedule end {total}")));
    }
    if t == 0 {
        return Ok(start);
    }
    if t == total {
        return Ok(end);
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(end + 0.5 * (start - end) * (1.0 + phase.cos()))
}

/// Learning-rate and weight-decay endpoints, both annealed with the same
/// cosine over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub lr0: f64,
    pub lr_end: f64,
    pub wd0: f64,
    pub wd_end: f64,
    pub total_steps: usize,
}

impl ScheduleSpec {
    /// ImageNet recipe: lr 0.1 → 0, weight decay 1e-4 → 1e-5.
    pub fn imagenet(total_steps: usize) -> Self {
        Self {
            lr0: 0.1,
            lr_end: 0.0,
            wd0: 1e-4,
            wd_end: 1e-5,
            total_steps,
        }
    }

    /// Same schedule with the weight-decay coefficient held at `wd0`.
    pub fn with_fixed_weight_decay(self) -> Self {
        Self {
            wd_end: self.wd0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if [self.lr0, self.lr_end, self.wd0, self.wd_end].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("schedule rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr(&self, t: usize) -> Result<f64> {
        cosine_value(t.min(self.total_steps), self.lr0, self.lr_end, self.total_steps)
    }

    pub fn weight_decay(&self, t: usize) -> Result<f64> {
        cosine_value(t.min(self.total_steps), self.wd0, self.wd_end, self.total_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPhase {
    pub start_epoch: usize,
    /// Exclusive.
    pub end_epoch: usize,
    pub resolution: usize,
    /// Augmentation strength. Carried for completeness; no augmentation
    /// transforms consume it.
    pub aug_strength: f64,
}

/// Progressive-learning schedule of input resolution by epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSpec {
    pub phases: Vec<CurriculumPhase>,
}

impl CurriculumSpec {
    /// 300-epoch ImageNet curriculum: 160 px (strength 0.3) for epochs 0–38,
    /// 192 px (0.6) for 39–113, 224 px (1.0) for 114 onward.
    pub fn imagenet() -> Self {
        Self {
            phases: vec![
                CurriculumPhase {
                    start_epoch: 0,
                    end_epoch: 39,
                    resolution: 160,
                    aug_strength: 0.3,
                },
                CurriculumPhase {
                    start_epoch: 39,
                    end_epoch: 114,
                    resolution: 192,
                    aug_strength: 0.6,
                },
                CurriculumPhase {
                    start_epoch: 114,
                    end_epoch: 300,
                    resolution: 224,
                    aug_strength: 1.0,
                },
            ],
        }
    }

    /// Single phase at a fixed resolution.
    pub fn constant(epochs: usize, resolution: usize) -> Self {
        Self {
            phases: vec![CurriculumPhase {
                start_epoch: 0,
                end_epoch: epochs,
                resolution,
                aug_strength: 1.0,
            }],
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.last().map_or(0, |p| p.end_epoch)
    }

    pub fn validate(&self) -> Result<()> {
        let mut expect = 0;
        for p in &self.phases {
            if p.start_epoch != expect || p.end_epoch <= p.start_epoch {
                return Err(Error::InvalidArgument(format!(
                    "curriculum phases must partition the epoch range; phase {}..{} breaks it",
                    p.start_epoch, p.end_epoch
                )));
            }
            if p.resolution == 0 {
                return Err(Error::InvalidArgument("curriculum resolution must be positive".into()));
            }
            expect = p.end_epoch;
        }
        if self.phases.is_empty() {
            return Err(Error::InvalidArgument("curriculum has no phases".into()));
        }
        Ok(())
    }

    /// Rescales epoch boundaries to `epochs` and resolutions so that the final
    /// phase lands on `final_resolution`.
    pub fn rescaled(&self, epochs: usize, final_resolution: usize) -> Result<Self> {
        self.validate()?;
        let total = self.total_epochs() as f64;
        let last_res = self.phases.last().expect("validated").resolution as f64;
        let mut phases = Vec::new();
        let mut start = 0;
        for (i, p) in self.phases.iter().enumerate() {
            let end = if i + 1 == self.phases.len() {
                epochs
            } else {
                ((p.end_epoch as f64 / total) * epochs as f64).round() as usize
            };
            if end <= start {
                continue;
            }
            let res = ((p.resolution as f64 / last_res) * final_resolution as f64).round().max(1.0) as usize;
            phases.push(CurriculumPhase {
                start_epoch: start,
                end_epoch: end,
                resolution: res,
                aug_strength: p.aug_strength,
            });
            start = end;
        }
        let out = Self { phases };
        out.validate()?;
        Ok(out)
    }

    pub fn phase_at(&self, epoch: usize) -> Option<&CurriculumPhase> {
        self.phases
            .iter()
            .find(|p| epoch >= p.start_epoch && epoch < p.end_epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_value(0, 1e-4, 1e-5, 100).unwrap(), 1e-4);
        assert_eq!(cosine_value(100, 1e-4, 1e-5, 100).unwrap(), 1e-5);
        assert!((cosine_value(50, 1e-4, 1e-5, 100).unwrap() - 5.5e-5).abs() < 1e-12);
        assert!(cosine_value(0, 1.0, 0.0, 0).is_err());
        assert!(cosine_value(5, 1.0, 0.0, 4).is_err());
    }

    #[test]
    fn cosine_is_monotone_for_decreasing_endpoints() {
        let vals: Vec<f64> = (0..=37).map(|t| cosine_value(t, 0.1, 0.0, 37).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fixed_weight_decay_stays_put() {
        let s = ScheduleSpec::imagenet(10).with_fixed_weight_decay();
        for t in 0..=10 {
            assert_eq!(s.weight_decay(t).unwrap(), 1e-4);
        }
    }

    #[test]
    fn curriculum_partition_and_rescale() {
        let c = CurriculumSpec::imagenet();
        c.validate().unwrap();
        assert_eq!(c.total_epochs(), 300);
        assert_eq!(c.phase_at(38).unwrap().resolution, 160);
        assert_eq!(c.phase_at(39).unwrap().resolution, 192);
        assert_eq!(c.phase_at(299).unwrap().resolution, 224);
        assert!(c.phase_at(300).is_none());

        let small = c.rescaled(10, 32).unwrap();
        assert_eq!(small.total_epochs(), 10);
        assert_eq!(small.phases.last().unwrap().resolution, 32);
        assert!(small.phases[0].resolution < 32);

        let broken = CurriculumSpec {
            phases: vec![CurriculumPhase {
                start_epoch: 1,
                end_epoch: 3,
                resolution: 8,
                aug_strength: 0.0,
            }],
        };
        assert!(broken.validate().is_err());
    }
}
