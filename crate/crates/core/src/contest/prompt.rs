use std::fmt::Write as _;

use super::{ChatMessage, ContestCase, ContestError, Role};
use crate::hrv::{HrvFeatures, Segment};

pub const SYSTEM_PROMPT: &str = include_str!("system_prompt.txt");

fn ms(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.1} ms"))
}

fn ms2(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.1} ms^2"))
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.1} %"))
}

fn ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.3}"))
}

/// Fixed-order, fixed-precision rendering of one feature record.
pub fn format_metrics(f: &HrvFeatures) -> String {
    let mut s = String::new();
    if let Segment::Range { start, end } = f.segment {
        let _ = write!(s, "beats {start}-{end}, ");
    }
    let _ = write!(
        s,
        "n_beats {}, mean_rr {}, rmssd {}, sdnn {}, pnn50 {}, lf_power {}, hf_power {}, lf_hf_ratio {}",
        f.n_beats,
        ms(Some(f.mean_rr)),
        ms(f.rmssd),
        ms(Some(f.sdnn)),
        percent(f.pnn50),
        ms2(f.lf_power),
        ms2(f.hf_power),
        ratio(f.lf_hf_ratio),
    );
    s
}

pub fn user_message(case: &ContestCase) -> Result<String, ContestError> {
    let f_r = case
        .f_r
        .as_ref()
        .ok_or_else(|| ContestError::Contract("baseline HRV metrics are required".into()))?;
    let profile = match &case.profile {
        Some(p) if p.age.is_some() || p.sex.is_some() => {
            let age = p.age.map_or_else(|| "age not provided".to_string(), |a| format!("{a} years"));
            let sex = p.sex.map_or_else(|| "sex not provided".to_string(), |s| format!("{s:?}").to_lowercase());
            format!("1. Patient profile (optional): {age}, {sex}.")
        }
        _ => "1. Patient profile: not provided.".to_string(),
    };
    let regions = if case.f_d.is_empty() {
        "none detected".to_string()
    } else {
        case.f_d
            .iter()
            .enumerate()
            .map(|(i, f)| format!("[region_{}_metrics: {}]", i + 1, format_metrics(f)))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Ok(format!(
        "{profile}\n2. Prior AI Prediction: {}.\n3. Baseline HRV metrics: {}.\n4. Regional HRV discrepancies: {regions}.",
        case.baseline_prediction,
        format_metrics(f_r),
    ))
}

/// System and user messages for a case. Deterministic for a given case.
pub fn build_prompt(case: &ContestCase) -> Result<Vec<ChatMessage>, ContestError> {
    Ok(vec![
        ChatMessage::new(Role::System, SYSTEM_PROMPT),
        ChatMessage::new(Role::User, user_message(case)?),
    ])
}
