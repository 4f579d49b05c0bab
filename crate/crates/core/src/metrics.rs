//! Equilibrium accounting: market shares, profits, welfare, and the
//! serializable report produced by the CLI.
//!
//! Everything here is a pure function of the aggregates collected during the
//! final G evaluation plus the decision vector itself; nothing re-solves the
//! follower layer.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::leaders::{self, Aggregates, Evaluator, Layout};
use crate::network::{MultiModalNetwork, PricingScheme};
use crate::solver::{Equilibrium, ProbeReport, TraceRow};

#[derive(Debug, Clone)]
pub struct OperatorProfit {
    pub name: String,
    /// Fare revenue on direct (non-bundled) service.
    pub direct_revenue: f64,
    /// Wholesale income from bundled flow sold to the platform.
    pub wholesale_income: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Profits {
    /// Platform: fare revenue minus wholesale payments.
    pub platform: f64,
    pub platform_revenue: f64,
    pub wholesale_cost: f64,
    pub operator: Vec<OperatorProfit>,
    /// Platform plus all operators.
    pub total: f64,
}

pub fn profits(net: &MultiModalNetwork, layout: &Layout, y: &[f64], agg: &Aggregates) -> Profits {
    let mut platform_revenue = 0.0;
    for (slot, &od) in layout.p_ods.iter().enumerate() {
        platform_revenue += y[layout.p_offset() + slot] * agg.od_maas[od];
    }
    let mut wholesale_cost = 0.0;
    let mut operator = Vec::with_capacity(net.operators.len());
    for (opi, op) in net.operators.iter().enumerate() {
        let wholesale_income = op.wholesale_price * agg.x_maas[opi];
        wholesale_cost += wholesale_income;
        let direct_revenue = agg.revenue_direct[opi];
        operator.push(OperatorProfit {
            name: op.name.clone(),
            direct_revenue,
            wholesale_income,
            total: direct_revenue + wholesale_income,
        });
    }
    let platform = platform_revenue - wholesale_cost;
    let total = platform + operator.iter().map(|o| o.total).sum::<f64>();
    Profits {
        platform,
        platform_revenue,
        wholesale_cost,
        operator,
        total,
    }
}

#[derive(Debug, Clone)]
pub struct Shares {
    pub total_demand: f64,
    pub maas_pct: f64,
    pub nonmaas_pct: f64,
    pub driving_pct: f64,
    /// Mode share split across operators, proportional to each operator's
    /// service-link flow mass within the scope.
    pub maas_by_op_pct: Vec<f64>,
    pub nonmaas_by_op_pct: Vec<f64>,
    /// Transfer-link volume relative to demand.
    pub transfer_pct: f64,
    /// Transfer-link volume in travelers.
    pub transfer_flow: f64,
}

pub fn shares(net: &MultiModalNetwork, agg: &Aggregates) -> Shares {
    let total_demand: f64 = net.ods.iter().map(|od| od.demand).sum();
    let maas: f64 = agg.od_maas.iter().sum();
    let nonmaas: f64 = agg.od_nonmaas.iter().sum();
    let driving: f64 = agg.od_drive.iter().sum();
    let pct = |x: f64| 100.0 * x / total_demand;

    let split = |scope_pct: f64, weights: &[f64]| -> Vec<f64> {
        let mass: f64 = weights.iter().sum();
        if mass <= 0.0 {
            return vec![0.0; weights.len()];
        }
        weights.iter().map(|w| scope_pct * w / mass).collect()
    };

    Shares {
        total_demand,
        maas_pct: pct(maas),
        nonmaas_pct: pct(nonmaas),
        driving_pct: pct(driving),
        maas_by_op_pct: split(pct(maas), &agg.x_maas),
        nonmaas_by_op_pct: split(pct(nonmaas), &agg.svc_flow_direct),
        transfer_pct: pct(agg.transfer_flow),
        transfer_flow: agg.transfer_flow,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharesOut {
    pub maas: f64,
    pub nonmaas: f64,
    pub driving: f64,
    pub maas_by_operator: Vec<NamedValue>,
    pub nonmaas_by_operator: Vec<NamedValue>,
    pub transfer: f64,
    pub transfer_flow: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorProfitOut {
    pub name: String,
    pub direct_revenue: f64,
    pub wholesale_income: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfitsOut {
    pub platform: f64,
    pub platform_revenue: f64,
    pub wholesale_cost: f64,
    pub operators: Vec<OperatorProfitOut>,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdFareOut {
    pub origin: usize,
    pub dest: usize,
    pub fare: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorFareOut {
    pub name: String,
    pub scheme: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_link: Option<Vec<NamedValue>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaresOut {
    pub od: Vec<OdFareOut>,
    pub operators: Vec<OperatorFareOut>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkRow {
    pub label: String,
    pub capacitated: bool,
    pub t0: f64,
    pub t: f64,
    pub supply: f64,
    pub flow: f64,
    pub lambda: f64,
    pub gap: f64,
}

/// Mode split of one OD pair, in travelers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdRow {
    pub origin: usize,
    pub dest: usize,
    pub demand: f64,
    pub maas: f64,
    pub nonmaas: f64,
    pub driving: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub scenario: String,
    pub converged: bool,
    pub iterations: usize,
    pub natural_residual: f64,
    pub iterate_diff: f64,
    pub follower_evals: u64,
    pub total_demand: f64,
    pub shares: SharesOut,
    pub profits: ProfitsOut,
    pub welfare: f64,
    pub social_welfare: f64,
    pub fares: FaresOut,
    pub od: Vec<OdRow>,
    pub links: Vec<LinkRow>,
}

pub fn build_report(scenario: &str, ev: &Evaluator, eq: &Equilibrium) -> EquilibriumReport {
    let net = &ev.net;
    let layout = &ev.layout;
    let p = profits(net, layout, &eq.y, &eq.agg);
    let s = shares(net, &eq.agg);
    let names: Vec<&str> = net.operators.iter().map(|o| o.name.as_str()).collect();

    let named = |values: &[f64]| -> Vec<NamedValue> {
        values
            .iter()
            .zip(&names)
            .map(|(&value, &name)| NamedValue {
                name: name.to_string(),
                value,
            })
            .collect()
    };

    let od_fares: Vec<OdFareOut> = layout
        .p_ods
        .iter()
        .enumerate()
        .map(|(slot, &oi)| OdFareOut {
            origin: net.ods[oi].origin,
            dest: net.ods[oi].dest,
            fare: eq.y[layout.p_offset() + slot],
        })
        .collect();
    let op_fares: Vec<OperatorFareOut> = net
        .operators
        .iter()
        .enumerate()
        .map(|(opi, op)| {
            let off = layout.rate_offset(opi);
            match op.pricing {
                PricingScheme::PerLink => OperatorFareOut {
                    name: op.name.clone(),
                    scheme: "per_link".to_string(),
                    rate: None,
                    per_link: Some(
                        net.price_links[opi]
                            .iter()
                            .enumerate()
                            .map(|(j, &tl)| NamedValue {
                                name: net.tlink_label(tl as usize),
                                value: eq.y[off + j],
                            })
                            .collect(),
                    ),
                },
                scheme => OperatorFareOut {
                    name: op.name.clone(),
                    scheme: match scheme {
                        PricingScheme::DistanceRate => "distance_rate",
                        PricingScheme::FlatRate => "flat_rate",
                        PricingScheme::PerLink => unreachable!(),
                    }
                    .to_string(),
                    rate: (layout.rate_len[opi] == 1).then(|| eq.y[off]),
                    per_link: None,
                },
            }
        })
        .collect();

    let od_rows: Vec<OdRow> = net
        .ods
        .iter()
        .enumerate()
        .map(|(oi, od)| OdRow {
            origin: od.origin,
            dest: od.dest,
            demand: od.demand,
            maas: eq.agg.od_maas[oi],
            nonmaas: eq.agg.od_nonmaas[oi],
            driving: eq.agg.od_drive[oi],
        })
        .collect();

    let links = leaders::capacitated_duals(ev, &eq.y, &eq.agg)
        .into_iter()
        .map(|d| LinkRow {
            label: d.label,
            capacitated: d.capacitated,
            t0: d.t0,
            t: d.t,
            supply: d.z,
            flow: d.xbar,
            lambda: d.lambda,
            gap: d.gap,
        })
        .collect();

    EquilibriumReport {
        scenario: scenario.to_string(),
        converged: eq.converged,
        iterations: eq.iterations,
        natural_residual: eq.natural_residual,
        iterate_diff: eq.iterate_diff,
        follower_evals: eq.follower_evals,
        total_demand: s.total_demand,
        shares: SharesOut {
            maas: s.maas_pct,
            nonmaas: s.nonmaas_pct,
            driving: s.driving_pct,
            maas_by_operator: named(&s.maas_by_op_pct),
            nonmaas_by_operator: named(&s.nonmaas_by_op_pct),
            transfer: s.transfer_pct,
            transfer_flow: s.transfer_flow,
        },
        profits: ProfitsOut {
            platform: p.platform,
            platform_revenue: p.platform_revenue,
            wholesale_cost: p.wholesale_cost,
            operators: p
                .operator
                .iter()
                .map(|o| OperatorProfitOut {
                    name: o.name.clone(),
                    direct_revenue: o.direct_revenue,
                    wholesale_income: o.wholesale_income,
                    total: o.total,
                })
                .collect(),
            total: p.total,
        },
        welfare: eq.agg.welfare,
        social_welfare: eq.agg.welfare + p.total,
        fares: FaresOut {
            od: od_fares,
            operators: op_fares,
        },
        od: od_rows,
        links,
    }
}

fn fmt1(x: f64) -> String {
    format!("{x:.1}")
}

pub fn render_table(r: &EquilibriumReport) -> String {
    let mut s = String::new();
    let push = |s: &mut String, line: String| {
        s.push_str(&line);
        s.push('\n');
    };
    push(&mut s, format!("scenario: {}", r.scenario));
    push(
        &mut s,
        format!(
            "converged: {} after {} iterations (natural residual {:.3e}, {} follower evals)",
            r.converged, r.iterations, r.natural_residual, r.follower_evals
        ),
    );
    push(&mut s, String::new());
    push(&mut s, "market shares (% of demand)".to_string());
    let splits = |by: &[NamedValue]| -> String {
        if by.iter().all(|nv| nv.value == 0.0) {
            String::new()
        } else {
            let inner: Vec<String> = by
                .iter()
                .map(|nv| format!("{} {}", nv.name, fmt1(nv.value)))
                .collect();
            format!("  [{}]", inner.join(", "))
        }
    };
    push(
        &mut s,
        format!(
            "  MaaS      {:>8}{}",
            fmt1(r.shares.maas),
            splits(&r.shares.maas_by_operator)
        ),
    );
    push(
        &mut s,
        format!(
            "  non-MaaS  {:>8}{}",
            fmt1(r.shares.nonmaas),
            splits(&r.shares.nonmaas_by_operator)
        ),
    );
    push(
        &mut s,
        format!("  driving   {:>8}", fmt1(r.shares.driving)),
    );
    push(
        &mut s,
        format!(
            "  transfers {:>8}  ({} travelers)",
            fmt1(r.shares.transfer),
            fmt1(r.shares.transfer_flow)
        ),
    );
    push(&mut s, String::new());
    push(&mut s, "profits".to_string());
    push(
        &mut s,
        format!(
            "  platform  {:>12}  (revenue {}, wholesale cost {})",
            fmt1(r.profits.platform),
            fmt1(r.profits.platform_revenue),
            fmt1(r.profits.wholesale_cost)
        ),
    );
    for o in &r.profits.operators {
        push(
            &mut s,
            format!(
                "  {:<9} {:>12}  (direct {}, wholesale {})",
                o.name,
                fmt1(o.total),
                fmt1(o.direct_revenue),
                fmt1(o.wholesale_income)
            ),
        );
    }
    push(
        &mut s,
        format!("  total     {:>12}", fmt1(r.profits.total)),
    );
    push(&mut s, String::new());
    push(&mut s, "welfare".to_string());
    push(
        &mut s,
        format!("  traveler  {:>12}", fmt1(r.welfare)),
    );
    push(
        &mut s,
        format!("  social    {:>12}", fmt1(r.social_welfare)),
    );
    push(&mut s, String::new());
    push(&mut s, "mode split by od (travelers)".to_string());
    for row in &r.od {
        push(
            &mut s,
            format!(
                "  {}->{}  demand {:>7}  maas {:>7}  non-maas {:>7}  driving {:>7}",
                row.origin,
                row.dest,
                fmt1(row.demand),
                fmt1(row.maas),
                fmt1(row.nonmaas),
                fmt1(row.driving)
            ),
        );
    }
    push(&mut s, String::new());
    push(&mut s, "fares".to_string());
    for f in &r.fares.od {
        push(
            &mut s,
            format!("  od {}->{}  {:.3}", f.origin, f.dest, f.fare),
        );
    }
    for f in &r.fares.operators {
        match (&f.rate, &f.per_link) {
            (Some(rate), _) => push(
                &mut s,
                format!("  {} ({})  {:.3}", f.name, f.scheme, rate),
            ),
            (None, Some(links)) => {
                for nv in links {
                    push(
                        &mut s,
                        format!("  {} {}  {:.3}", f.name, nv.name, nv.value),
                    );
                }
            }
            (None, None) => {}
        }
    }
    s
}

/// Two-column key,value flattening of the report.
pub fn render_csv(r: &EquilibriumReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("scenario".into(), r.scenario.clone()),
        ("converged".into(), r.converged.to_string()),
        ("iterations".into(), r.iterations.to_string()),
        ("natural_residual".into(), format!("{:e}", r.natural_residual)),
        ("follower_evals".into(), r.follower_evals.to_string()),
        ("total_demand".into(), r.total_demand.to_string()),
        ("share_maas".into(), r.shares.maas.to_string()),
        ("share_nonmaas".into(), r.shares.nonmaas.to_string()),
        ("share_driving".into(), r.shares.driving.to_string()),
        ("share_transfer".into(), r.shares.transfer.to_string()),
        ("transfer_flow".into(), r.shares.transfer_flow.to_string()),
        ("profit_platform".into(), r.profits.platform.to_string()),
        ("profit_total".into(), r.profits.total.to_string()),
        ("welfare".into(), r.welfare.to_string()),
        ("social_welfare".into(), r.social_welfare.to_string()),
    ];
    for nv in &r.shares.maas_by_operator {
        rows.push((format!("share_maas_{}", nv.name), nv.value.to_string()));
    }
    for nv in &r.shares.nonmaas_by_operator {
        rows.push((format!("share_nonmaas_{}", nv.name), nv.value.to_string()));
    }
    for o in &r.profits.operators {
        rows.push((format!("profit_{}", o.name), o.total.to_string()));
    }
    for f in &r.fares.od {
        rows.push((format!("fare_od_{}_{}", f.origin, f.dest), f.fare.to_string()));
    }
    for f in &r.fares.operators {
        if let Some(rate) = f.rate {
            rows.push((format!("fare_rate_{}", f.name), rate.to_string()));
        }
    }
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

pub fn compare(a: &EquilibriumReport, b: &EquilibriumReport) -> Vec<CompareRow> {
    let mut rows = Vec::new();
    let mut add = |metric: &str, va: f64, vb: f64| {
        rows.push(CompareRow {
            metric: metric.to_string(),
            a: va,
            b: vb,
            delta: vb - va,
        });
    };
    add("share_maas", a.shares.maas, b.shares.maas);
    add("share_nonmaas", a.shares.nonmaas, b.shares.nonmaas);
    add("share_driving", a.shares.driving, b.shares.driving);
    add("share_transfer", a.shares.transfer, b.shares.transfer);
    add("transfer_flow", a.shares.transfer_flow, b.shares.transfer_flow);
    add("profit_platform", a.profits.platform, b.profits.platform);
    let names: Vec<String> = a
        .profits
        .operators
        .iter()
        .chain(&b.profits.operators)
        .map(|o| o.name.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    for name in names {
        let find = |r: &EquilibriumReport| {
            r.profits
                .operators
                .iter()
                .find(|o| o.name == name)
                .map_or(0.0, |o| o.total)
        };
        add(&format!("profit_{name}"), find(a), find(b));
    }
    add("profit_total", a.profits.total, b.profits.total);
    add("welfare", a.welfare, b.welfare);
    add("social_welfare", a.social_welfare, b.social_welfare);
    rows
}

pub fn render_compare(rows: &[CompareRow], name_a: &str, name_b: &str) -> String {
    let mut s = format!(
        "{:<22} {:>14} {:>14} {:>14}  {}\n",
        "metric", name_a, name_b, "delta", "change"
    );
    for r in rows {
        let arrow = if r.delta > 0.0 {
            "up"
        } else if r.delta < 0.0 {
            "down"
        } else {
            "="
        };
        let rel = if r.a.abs() > 1e-12 {
            format!(" ({:+.1}%)", 100.0 * r.delta / r.a.abs())
        } else {
            String::new()
        };
        s.push_str(&format!(
            "{:<22} {:>14} {:>14} {:>14}  {arrow}{rel}\n",
            r.metric,
            fmt1(r.a),
            fmt1(r.b),
            fmt1(r.delta)
        ));
    }
    s
}

pub fn write_trace_csv<W: Write>(w: W, rows: &[TraceRow], op_names: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec![
        "iteration".to_string(),
        "natural_residual".to_string(),
        "iterate_diff".to_string(),
        "elapsed_ms".to_string(),
        "platform_profit".to_string(),
    ];
    for name in op_names {
        header.push(format!("profit_{name}"));
    }
    header.push("welfare".to_string());
    wtr.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            format!("{:e}", r.natural_residual),
            format!("{:e}", r.iterate_diff),
            format!("{:.3}", r.elapsed_ms),
            r.platform_profit.to_string(),
        ];
        for p in &r.operator_profit {
            rec.push(p.to_string());
        }
        rec.push(r.welfare.to_string());
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_duals_csv<W: Write>(w: W, rows: &[LinkRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "link", "capacitated", "t0", "t", "supply", "flow", "lambda", "gap",
    ])
    .map_err(csv_err)?;
    for r in rows {
        wtr.write_record([
            r.label.clone(),
            r.capacitated.to_string(),
            r.t0.to_string(),
            r.t.to_string(),
            r.supply.to_string(),
            r.flow.to_string(),
            r.lambda.to_string(),
            r.gap.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_probe_csv<W: Write>(w: W, report: &ProbeReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["theta", "ratio", "replicate", "converged", "iterations", "gap"])
        .map_err(csv_err)?;
    for r in &report.rows {
        wtr.write_record([
            r.theta.to_string(),
            r.ratio.to_string(),
            r.replicate.to_string(),
            r.converged.to_string(),
            r.iterations.to_string(),
            format!("{:e}", r.gap),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => crate::error::Error::Io(io),
        other => crate::error::Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_report(maas: f64, platform: f64, welfare: f64) -> EquilibriumReport {
        EquilibriumReport {
            scenario: "test".into(),
            converged: true,
            iterations: 10,
            natural_residual: 1e-7,
            iterate_diff: 1e-8,
            follower_evals: 21,
            total_demand: 1000.0,
            shares: SharesOut {
                maas,
                nonmaas: 50.0,
                driving: 50.0 - maas,
                maas_by_operator: vec![],
                nonmaas_by_operator: vec![],
                transfer: 5.0,
                transfer_flow: 50.0,
            },
            profits: ProfitsOut {
                platform,
                platform_revenue: platform.max(0.0),
                wholesale_cost: 0.0,
                operators: vec![OperatorProfitOut {
                    name: "pt".into(),
                    direct_revenue: 100.0,
                    wholesale_income: 0.0,
                    total: 100.0,
                }],
                total: platform + 100.0,
            },
            welfare,
            social_welfare: welfare + platform + 100.0,
            fares: FaresOut {
                od: vec![],
                operators: vec![],
            },
            od: vec![],
            links: vec![],
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = dummy_report(20.0, 50.0, -1000.0);
        let text = serde_json::to_string_pretty(&r).unwrap();
        let back: EquilibriumReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.scenario, "test");
        assert_eq!(back.profits.operators.len(), 1);
        assert!((back.social_welfare - r.social_welfare).abs() < 1e-12);
    }

    #[test]
    fn compare_reports_deltas() {
        let a = dummy_report(10.0, 0.0, -2000.0);
        let b = dummy_report(30.0, 80.0, -1500.0);
        let rows = compare(&a, &b);
        let maas = rows.iter().find(|r| r.metric == "share_maas").unwrap();
        assert!((maas.delta - 20.0).abs() < 1e-12);
        let welfare = rows.iter().find(|r| r.metric == "welfare").unwrap();
        assert!((welfare.delta - 500.0).abs() < 1e-12);

        let text = render_compare(&rows, "a", "b");
        let maas_line = text.lines().find(|l| l.starts_with("share_maas")).unwrap();
        assert!(maas_line.contains("up (+200.0%)"), "{maas_line}");
        let flat = text.lines().find(|l| l.starts_with("profit_pt")).unwrap();
        assert!(flat.contains('='), "{flat}");
    }

    #[test]
    fn table_formats_one_decimal() {
        let r = dummy_report(18.86, 232.94, -19287.02);
        let table = render_table(&r);
        assert!(table.contains("18.9"), "{table}");
        assert!(table.contains("232.9"), "{table}");
        assert!(table.contains("-19287.0"), "{table}");
    }
}
