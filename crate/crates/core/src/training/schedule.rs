use serde::{Deserialize, Serialize};

/// How the learning rate changes every `decay_every` epochs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    /// `r <- r^exponent`, applied to the value itself. For `r < 1` this
    /// raises the rate.
    #[default]
    PowerOfRate,
    /// `r <- exponent * r`.
    Multiplicative,
    /// No change.
    Constant,
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_schedule(epoch: usize, lr0: f64, exponent: f64, every: usize, mode: LrDecay) -> f64 {
    let k = epoch.checked_div(every).unwrap_or(0) as i32;
    match mode {
        LrDecay::PowerOfRate => lr0.powf(exponent.powi(k)),
        LrDecay::Multiplicative => lr0 * exponent.powi(k),
        LrDecay::Constant => lr0,
    }
}
