//! Trajectory tables: one CSV row per trajectory row, with columns
//! `agent_id`, `window_start_epoch`, `row` and the six feature channels.
//! Consecutive rows sharing `(agent_id, window_start_epoch)` form one
//! trajectory; `row` must count up from 0 within it.

use std::io::{Read, Write};

use ndarray::Array2;

use super::{BehaviorTrajectory, ForecastError, FEATURE_NAMES, N_FEATURES};

fn data_err(e: impl std::fmt::Display) -> ForecastError {
    ForecastError::Data(e.to_string())
}

pub fn write_trajectories_csv(w: impl Write, trajectories: &[BehaviorTrajectory]) -> Result<(), ForecastError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["agent_id", "window_start_epoch", "row"];
    header.extend(FEATURE_NAMES);
    out.write_record(&header).map_err(data_err)?;
    for t in trajectories {
        for (r, row) in t.x.rows().into_iter().enumerate() {
            let mut fields = vec![t.agent_id.clone(), t.window_start_epoch.to_string(), r.to_string()];
            fields.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&fields).map_err(data_err)?;
        }
    }
    out.flush().map_err(data_err)
}

pub fn read_trajectories_csv(r: impl Read) -> Result<Vec<BehaviorTrajectory>, ForecastError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(data_err)?.clone();
    if header.len() != 3 + N_FEATURES || FEATURE_NAMES.iter().zip(header.iter().skip(3)).any(|(a, b)| *a != b) {
        return Err(ForecastError::Data(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    let mut current: Option<(String, u64, Vec<f64>)> = None;
    let flush = |cur: Option<(String, u64, Vec<f64>)>, out: &mut Vec<BehaviorTrajectory>| -> Result<(), ForecastError> {
        if let Some((agent, start, values)) = cur {
            let rows = values.len() / N_FEATURES;
            let x = Array2::from_shape_vec((rows, N_FEATURES), values).expect("whole rows");
            out.push(BehaviorTrajectory::new(agent, start, x)?);
        }
        Ok(())
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(data_err)?;
        let at = |e: String| ForecastError::Data(format!("data line {}: {e}", line + 2));
        let agent = rec[0].to_string();
        let start: u64 = rec[1].parse().map_err(|e| at(format!("{e}")))?;
        let row: usize = rec[2].parse().map_err(|e| at(format!("{e}")))?;
        let values = (3..3 + N_FEATURES)
            .map(|i| rec[i].parse::<f64>().map_err(|e| at(format!("{e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let same = matches!(&current, Some((a, s, _)) if *a == agent && *s == start && row > 0);
        if !same {
            flush(current.take(), &mut out)?;
            if row != 0 {
                return Err(at(format!("trajectory starts at row {row}")));
            }
            current = Some((agent, start, Vec::new()));
        }
        let cur = current.as_mut().expect("just set");
        if row != cur.2.len() / N_FEATURES {
            return Err(at(format!("row {row} out of order")));
        }
        cur.2.extend(values);
    }
    flush(current, &mut out)?;
    Ok(out)
}
