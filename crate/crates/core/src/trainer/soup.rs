use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Parameter snapshot taken at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub epoch: usize,
    pub val_kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoupOutcome {
    pub params: ParamStore,
    pub val_kl: f64,
    /// Validation KL of the best single checkpoint.
    pub best_single: f64,
    /// Epochs of the checkpoints averaged into the soup.
    pub ingredients: Vec<usize>,
}

/// Greedy soup: rank checkpoints by validation KL, start from the best and
/// admit each further checkpoint iff the uniform average of the admitted set
/// does not raise `evaluate`.
pub fn greedy_soup<F>(checkpoints: &[Checkpoint], mut evaluate: F) -> Result<SoupOutcome>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("greedy soup needs at least one checkpoint".into()));
    }
    let mut order: Vec<&Checkpoint> = checkpoints.iter().collect();
    order.sort_by(|a, b| a.val_kl.total_cmp(&b.val_kl).then(a.epoch.cmp(&b.epoch)));

    let mut members: Vec<&ParamStore> = vec![&order[0].params];
    let mut ingredients = vec![order[0].epoch];
    let mut soup = order[0].params.clone();
    let best_single = evaluate(&soup)?;
    let mut current = best_single;
    for c in &order[1..] {
        members.push(&c.params);
        let candidate = ParamStore::average(&members)?;
        let kl = evaluate(&candidate)?;
        if kl <= current {
            current = kl;
            soup = candidate;
            ingredients.push(c.epoch);
        } else {
            members.pop();
        }
    }
    assert!(current <= best_single, "soup KL {current} exceeds best single {best_single}");
    Ok(SoupOutcome {
        params: soup,
        val_kl: current,
        best_single,
        ingredients,
    })
}
