//! Browser bindings: group decomposition of a logit pair, batch rebalancing
//! and the long-tailed class-count profile. Every entry point takes plain
//! strings and returns a JSON document.

use ltkd::data::{decay_counts, imbalance_factor};
use ltkd::distributions::{inter_group, rebalance, softmax, BatchGroupStats};
use ltkd::grouping::{build_partition, ClassGroups, Group, GroupPolicy};
use ltkd::losses::{kd_sample, sample_terms};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Comma or whitespace separated numbers.
pub fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

/// One letter per class: `H`, `M` or `T` (case-insensitive).
pub fn parse_groups(labels: &str, num_classes: usize) -> Result<ClassGroups, String> {
    let letters: Vec<char> = labels
        .chars()
        .filter(|c| c.is_alphabetic())
        .map(|c| c.to_ascii_uppercase())
        .collect();
    if letters.len() != num_classes {
        return Err(format!("{} group labels for {num_classes} classes", letters.len()));
    }
    let mut members = vec![Vec::new(); 3];
    for (class, l) in letters.iter().enumerate() {
        let g = match l {
            'H' => 0,
            'M' => 1,
            'T' => 2,
            other => return Err(format!("unknown group label {other:?}")),
        };
        members[g].push(class);
    }
    // drop empty groups so a two-group split still decomposes
    members.retain(|m| !m.is_empty());
    ClassGroups::new(num_classes, members).map_err(|e| e.to_string())
}

/// KD between two logit vectors and its inter/intra-group decomposition.
pub fn decompose_json(teacher: &str, student: &str, groups: &str, tau: f64) -> Result<Value, String> {
    let zt = parse_numbers(teacher)?;
    let zs = parse_numbers(student)?;
    if zt.len() != zs.len() {
        return Err(format!("{} teacher logits vs {} student logits", zt.len(), zs.len()));
    }
    let groups = parse_groups(groups, zt.len())?;
    let terms = sample_terms(&zt, &zs, &groups, tau, None).map_err(|e| e.to_string())?;
    let kd = kd_sample(&zt, &zs, tau);
    let decomposed = terms.decomposed_total();
    Ok(json!({
        "kd": kd,
        "inter_kl": terms.inter_kl,
        "intra_kl": terms.intra_kl,
        "teacher_inter": terms.teacher_inter,
        "decomposed": decomposed,
        "residual": (kd - decomposed).abs(),
        "teacher_probs": softmax(&zt, tau).map_err(|e| e.to_string())?.to_vec(),
        "student_probs": softmax(&zs, tau).map_err(|e| e.to_string())?.to_vec(),
    }))
}

/// Rebalances the softmax of `logits` with scales derived from per-group
/// batch sums of teacher mass.
pub fn rebalance_json(logits: &str, groups: &str, batch_sums: &str, tau: f64) -> Result<Value, String> {
    let z = parse_numbers(logits)?;
    let groups = parse_groups(groups, z.len())?;
    let sums = parse_numbers(batch_sums)?;
    if sums.len() != groups.num_groups() {
        return Err(format!("{} batch sums for {} groups", sums.len(), groups.num_groups()));
    }
    let stats = BatchGroupStats::from_sums(sums).map_err(|e| e.to_string())?;
    let p = softmax(&z, tau).map_err(|e| e.to_string())?;
    let hat = rebalance(&p, &groups, &stats).map_err(|e| e.to_string())?;
    Ok(json!({
        "scales": stats.scales,
        "avg": stats.avg,
        "probs": p.to_vec(),
        "rebalanced": hat.to_vec(),
        "inter_before": inter_group(&p, &groups).map_err(|e| e.to_string())?,
        "inter_after": inter_group(&hat, &groups).map_err(|e| e.to_string())?,
        "sum": hat.iter().sum::<f64>(),
    }))
}

/// Per-class training counts for an exponential decay profile and the
/// rank-thirds head/medium/tail split.
pub fn decay_json(classes: usize, base: usize, gamma: f64) -> Result<Value, String> {
    let counts = decay_counts(classes, base, gamma).map_err(|e| e.to_string())?;
    let partition = build_partition(&counts, GroupPolicy::RankThirds).map_err(|e| e.to_string())?;
    let labels: String = (0..classes)
        .map(|c| match partition.group_label(c) {
            Group::Head => 'H',
            Group::Medium => 'M',
            Group::Tail => 'T',
        })
        .collect();
    Ok(json!({
        "counts": counts,
        "total": counts.iter().sum::<usize>(),
        "imbalance": imbalance_factor(&counts).map_err(|e| e.to_string())?,
        "groups": labels,
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn decompose(teacher: &str, student: &str, groups: &str, tau: f64) -> Result<String, JsValue> {
    to_js(decompose_json(teacher, student, groups, tau))
}

#[wasm_bindgen(js_name = rebalanceBatch)]
pub fn rebalance_batch(logits: &str, groups: &str, batch_sums: &str, tau: f64) -> Result<String, JsValue> {
    to_js(rebalance_json(logits, groups, batch_sums, tau))
}

#[wasm_bindgen(js_name = decayProfile)]
pub fn decay_profile(classes: usize, base: usize, gamma: f64) -> Result<String, JsValue> {
    to_js(decay_json(classes, base, gamma))
}
