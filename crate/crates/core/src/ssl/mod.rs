//! Student/teacher self-distillation over region representations.

pub mod augment;
pub mod config;
pub mod head;
pub mod loss;
pub mod model;
pub mod optim;
pub mod teacher;
pub mod train;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use augment::{make_views, AugConfig, ViewPair};
pub use config::DirlConfig;
pub use head::{HeadBank, ProjectionHead};
pub use loss::{aux_cell_count_loss, composite_loss, dino_pair_loss, sharpen_and_center, LossReport};
pub use model::{DirlModel, ViewData};
pub use teacher::{center_update, ema_update, TeacherState};
pub use train::{pretrain, train_step, TrainState};

/// Pretraining variant: which representations are matched across views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Image-level mean of all tokens.
    Baseline,
    /// Cell and background region means.
    Cellback,
    /// One region mean per cell type, the background mean and the image mean.
    CellbackV2,
    /// Cell/background means plus the four disentangled representations.
    Dirl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Cellback,
        Variant::CellbackV2,
        Variant::Dirl,
    ];

    pub fn uses_disentangle(self) -> bool {
        self == Variant::Dirl
    }

    /// Representation keys matched by this variant, in loss order.
    pub fn keys(self, cell_types: usize) -> Vec<RepKey> {
        match self {
            Variant::Baseline => vec![RepKey::Image],
            Variant::Cellback => vec![RepKey::Cell, RepKey::Back],
            Variant::CellbackV2 => {
                let mut k = vec![RepKey::Image];
                k.extend((0..cell_types).map(|j| RepKey::Class(j as u32)));
                k.push(RepKey::Back);
                k
            }
            Variant::Dirl => vec![
                RepKey::Cell,
                RepKey::Back,
                RepKey::SelfCell,
                RepKey::SelfBack,
                RepKey::CrossCell,
                RepKey::CrossBack,
            ],
        }
    }

    /// `(key, weight)` for every loss term. Disentangled terms take `λ2`,
    /// region terms `λ1`; Cellback-V2 weighs all its terms equally.
    pub fn weight_table(self, weights: &LossWeights, cell_types: usize) -> Vec<(RepKey, f64)> {
        let keys = self.keys(cell_types);
        match self {
            Variant::Baseline => vec![(RepKey::Image, 1.0)],
            Variant::Cellback => keys.into_iter().map(|k| (k, weights.lambda1)).collect(),
            Variant::CellbackV2 => {
                let w = 1.0 / keys.len() as f64;
                keys.into_iter().map(|k| (k, w)).collect()
            }
            Variant::Dirl => keys
                .into_iter()
                .map(|k| {
                    let w = if k.is_disentangled() {
                        weights.lambda2
                    } else {
                        weights.lambda1
                    };
                    (k, w)
                })
                .collect(),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "cellback" => Ok(Variant::Cellback),
            "cellback-v2" => Ok(Variant::CellbackV2),
            "dirl" => Ok(Variant::Dirl),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected baseline|cellback|cellback-v2|dirl)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Cellback => "cellback",
            Variant::CellbackV2 => "cellback-v2",
            Variant::Dirl => "dirl",
        })
    }
}

/// Names one pooled representation of a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RepKey {
    Image,
    Cell,
    Back,
    Class(u32),
    /// Cell tokens after the self-masked path (`f_cc`).
    SelfCell,
    /// Background tokens after the self-masked path (`f_bb`).
    SelfBack,
    /// Cell tokens after the cross-masked path (`f_cb`).
    CrossCell,
    /// Background tokens after the cross-masked path (`f_bc`).
    CrossBack,
}

impl RepKey {
    pub fn is_disentangled(self) -> bool {
        matches!(
            self,
            RepKey::SelfCell | RepKey::SelfBack | RepKey::CrossCell | RepKey::CrossBack
        )
    }

    pub fn name(self) -> String {
        match self {
            RepKey::Image => "image".into(),
            RepKey::Cell => "c".into(),
            RepKey::Back => "b".into(),
            RepKey::Class(j) => format!("class{j}"),
            RepKey::SelfCell => "cc".into(),
            RepKey::SelfBack => "bb".into(),
            RepKey::CrossCell => "cb".into(),
            RepKey::CrossBack => "bc".into(),
        }
    }
}

impl fmt::Display for RepKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Weights of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.1 / 4.0,
            aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.aux];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_tables() {
        let w = LossWeights::default();
        assert_eq!(Variant::Baseline.weight_table(&w, 2), vec![(RepKey::Image, 1.0)]);
        let dirl = Variant::Dirl.weight_table(&w, 2);
        assert_eq!(dirl.len(), 6);
        assert_eq!(dirl[0], (RepKey::Cell, 0.5));
        assert_eq!(dirl[5], (RepKey::CrossBack, 0.025));
        let v2 = Variant::CellbackV2.weight_table(&w, 5);
        assert_eq!(v2.len(), 7);
        assert!(v2.iter().all(|(_, x)| *x == 1.0 / 7.0));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("dino".parse::<Variant>().is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            aux: 0.0,
        };
        assert!(zero.validate().is_err());
    }
}
