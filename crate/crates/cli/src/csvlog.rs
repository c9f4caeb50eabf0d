//! CSV writers for training logs and exploitation scores.

use std::fmt::Write as _;

use dfsq_core::analysis::ExploitationRow;
use dfsq_core::train::TrainReport;

/// Training log with the mandatory header:
/// `step,loss,nll,div_enc,div_dec,dev_tok_acc,dev_seq_acc,dev_bleu`.
/// Wall time is deliberately not part of the schema, so identical runs
/// produce identical files.
pub fn train_log_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,loss,nll,div_enc,div_dec,dev_tok_acc,dev_seq_acc,dev_bleu\n");
    for r in &report.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.loss,
            r.nll,
            r.div_enc,
            r.div_dec,
            r.dev_token_accuracy,
            r.dev_sequence_accuracy,
            r.dev_bleu
        );
    }
    out
}

/// Exploitation scores as `side,node,input,score`. The leading comment
/// records that scores sum FFN input-block weights only; biases carry no
/// block structure and are excluded.
pub fn exploitation_csv(rows: &[ExploitationRow]) -> String {
    let mut out = String::from(
        "# scores are normalized absolute sums over ffn_in blocks; biases excluded\nside,node,input,score\n",
    );
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.side.name(), r.node, r.input, r.score);
    }
    out
}
