use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvFormulation {
    /// `L_adv = log(1 − d(fake)) + log d(real)`.
    #[default]
    Plain,
    /// Relativistic average form: each side is judged against the other's mean logit.
    Relativistic,
}

impl std::str::FromStr for AdvFormulation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Self::Plain),
            "relativistic" => Ok(Self::Relativistic),
            other => Err(format!("unknown adversarial formulation `{other}` (plain|relativistic)")),
        }
    }
}

impl std::fmt::Display for AdvFormulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::Relativistic => "relativistic",
        })
    }
}

pub struct AdvLosses<T> {
    /// The adversarial value, batch-averaged.
    pub value: Var<T>,
    /// Minimized by the flow and encoder.
    pub gen_loss: Var<T>,
    /// Minimized by the discriminator (`−value`).
    pub disc_objective: Var<T>,
    /// Mean `d(real)` and `d(fake)`.
    pub real_p: T,
    pub fake_p: T,
}

/// Losses from discriminator logits on a real and a generated batch.
///
/// Written in terms of `log σ` so saturated logits stay finite.
pub fn adversarial_losses<T: Scalar>(real_logits: &Var<T>, fake_logits: &Var<T>, form: AdvFormulation) -> Result<AdvLosses<T>> {
    if real_logits.shape().len() != 1 || fake_logits.shape().len() != 1 {
        return Err(Error::shape(
            "adversarial_losses",
            format!("expects logit vectors, got {:?} / {:?}", real_logits.shape(), fake_logits.shape()),
        ));
    }
    let mean_p = |v: &Var<T>| {
        let d = v.value();
        d.data().iter().map(|&l| crate::autodiff::sigmoid(l)).fold(T::zero(), |a, b| a + b) / T::of(d.len() as f64)
    };
    let real_p = mean_p(real_logits);
    let fake_p = mean_p(fake_logits);
    let (value, gen_loss) = match form {
        AdvFormulation::Plain => {
            let value = fake_logits.neg()?.log_sigmoid()?.mean()?.add(&real_logits.log_sigmoid()?.mean()?)?;
            (value.clone(), value)
        }
        AdvFormulation::Relativistic => {
            let rf = real_logits.sub(&fake_logits.mean()?)?;
            let fr = fake_logits.sub(&real_logits.mean()?)?;
            let value = fr.neg()?.log_sigmoid()?.mean()?.add(&rf.log_sigmoid()?.mean()?)?;
            let gen = rf.neg()?.log_sigmoid()?.mean()?.add(&fr.log_sigmoid()?.mean()?)?.neg()?;
            (value, gen)
        }
    };
    let disc_objective = value.neg()?;
    Ok(AdvLosses {
        value,
        gen_loss,
        disc_objective,
        real_p,
        fake_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn logits(tape: &Tape<f64>, v: &[f64]) -> Var<f64> {
        tape.var(Tensor::new(&[v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn undecided_discriminator_value() {
        let tape = Tape::new();
        let l = adversarial_losses(&logits(&tape, &[0.0, 0.0]), &logits(&tape, &[0.0]), AdvFormulation::Plain).unwrap();
        assert!((l.value.item().unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((l.value.item().unwrap() + 1.3863).abs() < 1e-4);
        assert_eq!(l.real_p, 0.5);
        assert_eq!(l.disc_objective.item().unwrap(), -l.value.item().unwrap());
    }

    #[test]
    fn perfect_discriminator_limit() {
        let tape = Tape::new();
        let l = adversarial_losses(&logits(&tape, &[40.0]), &logits(&tape, &[-40.0]), AdvFormulation::Plain).unwrap();
        let v = l.value.item().unwrap();
        assert!(v < 0.0 && v > -1e-15);
    }

    #[test]
    fn relativistic_symmetry() {
        let tape = Tape::new();
        let l = adversarial_losses(&logits(&tape, &[1.0, -1.0]), &logits(&tape, &[0.5, -0.5]), AdvFormulation::Relativistic).unwrap();
        // both sides have mean logit 0, so each term is log σ(±x) with symmetric x
        let rf = [1.0f64, -1.0];
        let want = rf.iter().map(|&x| crate::autodiff::log_sigmoid(-x * 0.5)).sum::<f64>() / 2.0
            + rf.iter().map(|&x| crate::autodiff::log_sigmoid(x)).sum::<f64>() / 2.0;
        assert!((l.value.item().unwrap() - want).abs() < 1e-14);
        let flat = adversarial_losses(&logits(&tape, &[3.0, 3.0]), &logits(&tape, &[3.0]), AdvFormulation::Relativistic).unwrap();
        assert!((flat.value.item().unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((flat.gen_loss.item().unwrap() + 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }
}
