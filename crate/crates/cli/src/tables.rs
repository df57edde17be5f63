//! Plain-text tables for standard output.

use crate::experiments::{AggregatorRow, AttackRow, BudgetPlan, CommsRow};

fn render(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out += &line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for row in rows {
        out += &line(row.iter().map(String::as_str).collect());
    }
    out
}

fn rounds(r: Option<f64>) -> String {
    r.map_or_else(|| "-".into(), |v| format!("{v}"))
}

pub fn aggregators(rows: &[AggregatorRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.clone(),
                format!("{:.2}", 100.0 * r.final_accuracy),
                rounds(r.rounds_to_target),
                format!("{:.1}", 100.0 * r.participation),
                format!("{:.3}", r.mb),
            ]
        })
        .collect();
    render(&["strategy", "final acc (%)", "rounds-to-target", "participation (%)", "MB"], &body)
}

pub fn comms(rows: &[CommsRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.clone(),
                format!("{:.4}", r.upload_mb),
                format!("{:.1}", r.delay_reduction_pct),
                format!("{:.2}", 100.0 * r.final_accuracy),
            ]
        })
        .collect();
    render(&["optimization", "upload MB", "delay reduction (%)", "final acc (%)"], &body)
}

pub fn attacks(rows: &[AttackRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.attack.clone(),
                if r.defense { "on" } else { "off" }.to_string(),
                r.defense_rate.map_or_else(String::new, |d| format!("{:.1}", 100.0 * d)),
                format!("{:.2}", 100.0 * r.final_accuracy),
                format!("{:.2}", r.accuracy_drop),
            ]
        })
        .collect();
    render(&["attack", "defense", "defense rate (%)", "final acc (%)", "accuracy drop (%)"], &body)
}

pub fn budget(plan: &BudgetPlan) -> String {
    let mut out = format!(
        "epsilon_total {}  rounds {}  per-round {}  denominator {}\n\n",
        plan.epsilon_total, plan.rounds, plan.per_round, plan.denominator
    );
    let body: Vec<Vec<String>> = plan
        .clients
        .iter()
        .map(|c| vec![c.client.to_string(), c.samples.to_string(), c.contribution.to_string(), format!("{}", c.epsilon)])
        .collect();
    out += &render(&["client", "samples", "contribution", "epsilon per round"], &body);
    out += &format!("\nsum over clients {}\n", plan.round_sum);
    out
}
