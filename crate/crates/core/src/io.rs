//! CSV output. Floats are written with 17 significant digits so that every
//! value reads back bit-exactly; lines end in `\n` and start with a header.

use std::io::{self, Write};

use crate::cascade::CascadeOutcome;
use crate::particle::{DensitySnapshot, Trajectory};
use crate::picard::{FrontPath, PicardOutcome};

/// 17 significant digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Columns `t,front,loss,alive,jump_flag,jump_size`; `jump_size` is the
/// front increment into each grid point.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut w: W) -> io::Result<()> {
    writeln!(w, "t,front,loss,alive,jump_flag,jump_size")?;
    for k in 0..traj.len() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_f64(traj.times[k]),
            fmt_f64(traj.fronts[k]),
            fmt_f64(traj.loss(k)),
            traj.alive[k],
            u8::from(traj.is_macroscopic(k)),
            fmt_f64(traj.increments[k]),
        )?;
    }
    Ok(())
}

pub fn write_snapshot_csv<W: Write>(snap: &DensitySnapshot, mut w: W) -> io::Result<()> {
    writeln!(w, "bin_left,bin_right,density")?;
    for (j, d) in snap.density.iter().enumerate() {
        writeln!(
            w,
            "{},{},{}",
            fmt_f64(snap.bin_edges[j]),
            fmt_f64(snap.bin_edges[j + 1]),
            fmt_f64(*d)
        )?;
    }
    Ok(())
}

/// Same front columns as the trajectory file: `t,front`.
pub fn write_front_csv<W: Write>(fp: &FrontPath, mut w: W) -> io::Result<()> {
    writeln!(w, "t,front")?;
    for (k, v) in fp.values.iter().enumerate() {
        writeln!(w, "{},{}", fmt_f64(k as f64 * fp.dt), fmt_f64(*v))?;
    }
    Ok(())
}

pub fn write_residuals_csv<W: Write>(out: &PicardOutcome, mut w: W) -> io::Result<()> {
    writeln!(w, "iteration,residual,ordering")?;
    for (n, (r, o)) in out.residual_history.iter().zip(&out.ordering).enumerate() {
        let o = match o {
            crate::picard::IterateOrdering::Equal => "equal",
            crate::picard::IterateOrdering::Increasing => "increasing",
            crate::picard::IterateOrdering::Decreasing => "decreasing",
            crate::picard::IterateOrdering::Crossing => "crossing",
        };
        writeln!(w, "{},{},{}", n + 1, fmt_f64(*r), o)?;
    }
    Ok(())
}

/// One row per iterate of each cascade: `epsilon,iteration,offset`.
pub fn write_cascade_csv<W: Write>(runs: &[CascadeOutcome], mut w: W) -> io::Result<()> {
    writeln!(w, "epsilon,iteration,offset")?;
    for run in runs {
        for (n, y) in run.trace.iter().enumerate() {
            writeln!(w, "{},{},{}", fmt_f64(run.epsilon), n, fmt_f64(*y))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 6.02214076e23, -2.5e-300, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(0.6), "5.9999999999999998e-1");
    }

    #[test]
    fn front_csv_layout() {
        let fp = FrontPath::constant(0.0, 0.5, 0.5, 2);
        let mut buf = Vec::new();
        write_front_csv(&fp, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], "t,front");
        assert_eq!(lines.len(), 5);
        assert!(!text.contains('\r'));
    }
}
