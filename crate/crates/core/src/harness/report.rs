use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::params::ParamStore;

/// Trainable parameter counts per top-level module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub modules: BTreeMap<String, usize>,
    pub total: usize,
}

pub fn param_count_report(store: &ParamStore) -> ParamReport {
    let mut modules = BTreeMap::new();
    for (_, p) in store.iter() {
        let top = p.module.split('.').next().unwrap_or(&p.module).to_string();
        *modules.entry(top).or_insert(0) += p.value.numel();
    }
    ParamReport { total: modules.values().sum(), modules }
}

impl ParamReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("module,parameters\n");
        for (m, n) in &self.modules {
            let _ = writeln!(s, "{m},{n}");
        }
        let _ = writeln!(s, "total,{}", self.total);
        s
    }
}
