//! Reader for the MATPOWER `mpc` table subset (bus, gen, branch, gencost).
//!
//! Only what the bundled IEEE cases need: `mpc.baseMVA = ...;` scalar
//! assignments and the four numeric matrices. Comments (`%`), blank lines,
//! and the `function mpc = ...` header are skipped. MW/MVAr columns are
//! converted to per-unit on the case base; degrees to radians.

use super::case::{
    Branch, Bus, BusKind, Generator, NetworkCase, DEFAULT_ANGLE_LIMIT,
};
use crate::error::{Error, Result};

/// Numeric table collected between `mpc.<name> = [` and `];`.
struct Table {
    name: String,
    rows: Vec<Vec<f64>>,
    /// Line number of the table opener, for error messages.
    line: usize,
}

pub fn parse_matpower(text: &str) -> Result<NetworkCase> {
    let mut base_mva: Option<f64> = None;
    let mut name = String::from("mpc");
    let mut tables: Vec<Table> = Vec::new();
    let mut current: Option<Table> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw).trim().to_string();
        if line.is_empty() {
            continue;
        }
        if let Some(table) = current.as_mut() {
            if line.starts_with("];") || line == "]" {
                tables.push(current.take().unwrap());
                continue;
            }
            let row = parse_row(&line, line_no)?;
            if !row.is_empty() {
                if let Some(prev) = table.rows.first() {
                    if row.len() != prev.len() {
                        return Err(Error::CaseSyntax {
                            line: line_no,
                            message: format!(
                                "ragged row in mpc.{}: {} columns, expected {}",
                                table.name,
                                row.len(),
                                prev.len()
                            ),
                        });
                    }
                }
                table.rows.push(row);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("function") {
            if let Some(eq) = rest.find('=') {
                name = rest[eq + 1..].trim().trim_end_matches(';').to_string();
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("mpc.") {
            let (field, value) = split_assignment(rest, line_no)?;
            if value.starts_with('[') {
                current = Some(Table {
                    name: field.to_string(),
                    rows: Vec::new(),
                    line: line_no,
                });
                // Allow single-line tables: `mpc.x = [1 2; 3 4];`
                let inline = value.trim_start_matches('[');
                if let Some(body) = inline.strip_suffix("];") {
                    let table = current.as_mut().unwrap();
                    for part in body.split(';') {
                        let row = parse_row(part, line_no)?;
                        if !row.is_empty() {
                            table.rows.push(row);
                        }
                    }
                    tables.push(current.take().unwrap());
                }
            } else if field == "baseMVA" {
                let value = value.trim_end_matches(';');
                base_mva = Some(value.parse().map_err(|_| Error::CaseSyntax {
                    line: line_no,
                    message: format!("invalid baseMVA value {value:?}"),
                })?);
            }
            // other scalar assignments (version, ...) are ignored
            continue;
        }
        // Unrecognized non-empty line outside a table: tolerate, MATPOWER
        // files often carry trailing helper code.
    }
    if let Some(tbl) = current {
        return Err(Error::CaseSyntax {
            line: tbl.line,
            message: format!("unterminated mpc.{} table", tbl.name),
        });
    }

    let base_mva = base_mva.ok_or(Error::CaseSyntax {
        line: 0,
        message: "missing mpc.baseMVA".into(),
    })?;
    let bus_tbl = take_table(&tables, "bus")?;
    let gen_tbl = take_table(&tables, "gen")?;
    let branch_tbl = take_table(&tables, "branch")?;
    // gencost is optional in MATPOWER; without it all units cost the same.
    let gencost = tables.iter().find(|t| t.name == "gencost");

    let mut buses = Vec::with_capacity(bus_tbl.rows.len());
    for row in &bus_tbl.rows {
        expect_cols(row, 13, "bus", bus_tbl.line)?;
        let kind = match row[1] as i64 {
            1 => BusKind::Load,
            2 => BusKind::Generator,
            3 => BusKind::Slack,
            other => {
                return Err(Error::CaseSemantic(format!(
                    "bus {}: unsupported bus type {}",
                    row[0], other
                )))
            }
        };
        buses.push(Bus {
            id: row[0] as usize,
            kind,
            p_demand: row[2] / base_mva,
            q_demand: row[3] / base_mva,
            gs: row[4] / base_mva,
            bs: row[5] / base_mva,
            vm_max: row[11],
            vm_min: row[12],
            va_min: -DEFAULT_ANGLE_LIMIT,
            va_max: DEFAULT_ANGLE_LIMIT,
        });
    }

    let mut generators = Vec::with_capacity(gen_tbl.rows.len());
    for (gi, row) in gen_tbl.rows.iter().enumerate() {
        expect_cols(row, 10, "gen", gen_tbl.line)?;
        let (c2, c1, c0) = match gencost {
            Some(tbl) => {
                let crow = tbl.rows.get(gi).ok_or_else(|| {
                    Error::CaseSemantic(format!("gencost row missing for generator {gi}"))
                })?;
                expect_cols(crow, 7, "gencost", tbl.line)?;
                if crow[0] as i64 != 2 || crow[3] as i64 != 3 {
                    return Err(Error::CaseSemantic(format!(
                        "generator {gi}: only 3-coefficient polynomial costs are supported"
                    )));
                }
                // Cost rows are $/h per MW powers; rescale so P is p.u.
                (crow[4] * base_mva * base_mva, crow[5] * base_mva, crow[6])
            }
            None => (0.0, 1.0, 0.0),
        };
        generators.push(Generator {
            bus: row[0] as usize,
            p_nominal: row[1] / base_mva,
            q_max: row[3] / base_mva,
            q_min: row[4] / base_mva,
            v_nominal: row[5],
            p_max: row[8] / base_mva,
            p_min: row[9] / base_mva,
            cost_c2: c2,
            cost_c1: c1,
            cost_c0: c0,
        });
    }

    let mut branches = Vec::with_capacity(branch_tbl.rows.len());
    for row in &branch_tbl.rows {
        expect_cols(row, 11, "branch", branch_tbl.line)?;
        let rate_a = row[5];
        branches.push(Branch {
            from: row[0] as usize,
            to: row[1] as usize,
            r: row[2],
            x: row[3],
            b_charge: row[4],
            s_max: if rate_a > 0.0 {
                Some(rate_a / base_mva)
            } else {
                None
            },
            tap: if row[8] == 0.0 { 1.0 } else { row[8] },
            shift: row[9].to_radians(),
        });
    }

    let case = NetworkCase {
        name,
        base_mva,
        buses,
        generators,
        branches,
    };
    case.validate()?;
    Ok(case)
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn split_assignment(rest: &str, line: usize) -> Result<(&str, &str)> {
    let eq = rest.find('=').ok_or(Error::CaseSyntax {
        line,
        message: "expected assignment after mpc.".into(),
    })?;
    Ok((rest[..eq].trim(), rest[eq + 1..].trim()))
}

fn parse_row(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.trim_end_matches(';')
        .split_whitespace()
        .map(|tok| {
            tok.parse().map_err(|_| Error::CaseSyntax {
                line: line_no,
                message: format!("invalid number {tok:?}"),
            })
        })
        .collect()
}

fn take_table<'a>(tables: &'a [Table], name: &str) -> Result<&'a Table> {
    tables
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::CaseSyntax {
            line: 0,
            message: format!("missing mpc.{name} table"),
        })
}

fn expect_cols(row: &[f64], want: usize, table: &str, line: usize) -> Result<()> {
    if row.len() < want {
        return Err(Error::CaseSyntax {
            line,
            message: format!(
                "mpc.{table} row has {} columns, need at least {want}",
                row.len()
            ),
        });
    }
    Ok(())
}
