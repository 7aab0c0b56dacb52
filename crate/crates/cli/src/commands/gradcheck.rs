//! `stws gradcheck`: verify attention gradients against finite differences.

use std::path::Path;

use stws_core::attention;
use stws_core::surrogate::{
    self, GRADCHECK_TOLERANCE,
};

use crate::CliError;

pub struct GradcheckOutcome {
    pub report_text: String,
    pub pass: bool,
}

pub fn cmd_gradcheck(seed: u64, checkpoint: Option<&Path>) -> Result<GradcheckOutcome, CliError> {
    let mut lines = Vec::new();
    let (max_rel, pass) = match checkpoint {
        Some(path) => {
            let params = attention::load_checkpoint(path).map_err(|e| {
                CliError::Runtime(format!("checkpoint rejected: {e}"))
            })?;
            lines.push(format!(
                "checkpoint {} (m = {}, seed = {})",
                path.display(),
                params.taps(),
                params.seed
            ));
            let examples = surrogate::gradcheck_examples_for(&params, seed);
            let err = surrogate::gradcheck_max_rel_err(&params, &examples)
                .map_err(CliError::from)?;
            lines.push(format!("seed {seed}: max rel err {err:.3e}"));
            (err, err <= GRADCHECK_TOLERANCE)
        }
        None => {
            let report = surrogate::gradcheck_suite(seed, 5).map_err(CliError::from)?;
            for (s, err) in &report.per_seed {
                lines.push(format!("seed {s}: max rel err {err:.3e}"));
            }
            (report.max_rel_err, report.pass)
        }
    };
    lines.push(format!(
        "max rel err {} {GRADCHECK_TOLERANCE:.0e}: {}",
        if pass { "<=" } else { ">" },
        if pass { "PASS" } else { "FAIL" }
    ));
    let _ = max_rel;
    Ok(GradcheckOutcome {
        report_text: lines.join("\n"),
        pass,
    })
}
