//! Built-in worlds. All use unit isotropic covariances so that contrastive score
//! differences are constant in `x`.

use crate::error::{Error, Result};
use crate::Vector;

use super::{GaussianMixture, World};

fn unit(xs: &[f64]) -> GaussianMixture {
    GaussianMixture::unit(Vector::from_vec(xs.to_vec()))
}

/// A single prompt `noise` with data `N(0, I_d)`.
pub fn standard_normal(dim: usize) -> World {
    World::builder(dim)
        .prompt("noise", 1.0, GaussianMixture::unit(Vector::zeros(dim)))
        .build()
        .expect("valid preset")
}

/// `left ~ N(−2, 1)`, `right ~ N(2, 1)`, equal priors; ∅ is their even mixture.
pub fn symmetric_1d() -> World {
    World::builder(1)
        .prompt("left", 0.5, unit(&[-2.0]))
        .prompt("right", 0.5, unit(&[2.0]))
        .build()
        .expect("valid preset")
}

/// `photo ~ N((−1, 0), I)` and `photo+winter ~ N((1, 0), I)`: the concept lives on
/// coordinate 0 only.
pub fn two_prompt() -> World {
    World::builder(2)
        .prompt("photo", 0.5, unit(&[-1.0, 0.0]))
        .prompt("photo+winter", 0.5, unit(&[1.0, 0.0]))
        .build()
        .expect("valid preset")
}

/// Two independent factors: eyeglasses on coordinate 0 (±0.5) and species on
/// coordinate 1 (cat −3, dog +3), four leaves at equal prior.
///
/// `cat+portrait ~ N((−3, 0), I)` is a zero-prior domain prompt: it sits beyond
/// `cat` on the eyeglasses axis and between the species modes, so steering it
/// along coordinate 0 is possible without touching coordinate 1.
pub fn two_factor() -> World {
    World::builder(2)
        .prompt("cat", 0.25, unit(&[-0.5, -3.0]))
        .prompt("cat+eyeglasses", 0.25, unit(&[0.5, -3.0]))
        .prompt("dog", 0.25, unit(&[-0.5, 3.0]))
        .prompt("dog+eyeglasses", 0.25, unit(&[0.5, 3.0]))
        .prompt("cat+portrait", 0.0, unit(&[-3.0, 0.0]))
        .build()
        .expect("valid preset")
}

pub const PRESET_NAMES: [&str; 4] = ["standard-normal", "symmetric-1d", "two-prompt", "two-factor"];

/// Look up a preset by name (`standard-normal` is two-dimensional).
pub fn by_name(name: &str) -> Result<World> {
    match name {
        "standard-normal" => Ok(standard_normal(2)),
        "symmetric-1d" => Ok(symmetric_1d()),
        "two-prompt" => Ok(two_prompt()),
        "two-factor" => Ok(two_factor()),
        other => Err(Error::Config(format!(
            "unknown world `{other}`; presets are {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::PromptId;

    #[test]
    fn presets_build() {
        for name in PRESET_NAMES {
            assert!(by_name(name).is_ok());
        }
        assert!(by_name("nope").is_err());
    }

    #[test]
    fn domain_prompt_is_excluded_from_unconditional() {
        let w = two_factor();
        let empty = w.mixture(&PromptId::empty()).unwrap();
        assert_eq!(empty.components().len(), 4);
        assert!(empty.mean().norm() < 1e-15);
    }
}
