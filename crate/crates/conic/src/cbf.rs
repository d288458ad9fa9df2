//! Conic Benchmark Format (CBF v3) export for cross-checking programs in external solvers.

use std::fmt::Write;

use crate::program::ConicProgram;

impl ConicProgram {
    pub fn to_cbf(&self) -> String {
        let mut out = String::new();
        let n = self.num_vars();
        let w = &mut out;
        let _ = writeln!(w, "VER\n3\n");
        let _ = writeln!(w, "OBJSENSE\nMIN\n");
        let _ = writeln!(w, "VAR\n{n} 1\nF {n}\n");

        let psd = self.psd_constraints();
        if !psd.is_empty() {
            let _ = writeln!(w, "PSDCON\n{}", psd.len());
            for c in psd {
                let _ = writeln!(w, "{}", c.dim);
            }
            let _ = writeln!(w);
        }

        let eqs = self.equalities();
        let nns = self.nonnegatives();
        let m = eqs.len() + nns.len();
        if m > 0 {
            let k = usize::from(!eqs.is_empty()) + usize::from(!nns.is_empty());
            let _ = writeln!(w, "CON\n{m} {k}");
            if !eqs.is_empty() {
                let _ = writeln!(w, "L= {}", eqs.len());
            }
            if !nns.is_empty() {
                let _ = writeln!(w, "L+ {}", nns.len());
            }
            let _ = writeln!(w);
        }

        let obj = self.objective();
        let _ = writeln!(w, "OBJACOORD\n{}", obj.terms().len());
        for &(j, c) in obj.terms() {
            let _ = writeln!(w, "{j} {c:e}");
        }
        let _ = writeln!(w);
        if obj.constant_term() != 0.0 {
            let _ = writeln!(w, "OBJBCOORD\n{:e}\n", obj.constant_term());
        }

        if m > 0 {
            let rows: Vec<_> = eqs.iter().chain(nns.iter()).collect();
            let nnz: usize = rows.iter().map(|e| e.terms().len()).sum();
            let _ = writeln!(w, "ACOORD\n{nnz}");
            for (i, e) in rows.iter().enumerate() {
                for &(j, c) in e.terms() {
                    let _ = writeln!(w, "{i} {j} {c:e}");
                }
            }
            let _ = writeln!(w);
            let consts: Vec<_> =
                rows.iter().enumerate().filter(|(_, e)| e.constant_term() != 0.0).collect();
            let _ = writeln!(w, "BCOORD\n{}", consts.len());
            for (i, e) in consts {
                let _ = writeln!(w, "{i} {:e}", e.constant_term());
            }
            let _ = writeln!(w);
        }

        if !psd.is_empty() {
            let mut h = Vec::new();
            let mut d = Vec::new();
            for (k, c) in psd.iter().enumerate() {
                for col in 0..c.dim {
                    for row in col..c.dim {
                        let e = c.entry(row, col);
                        for &(j, v) in e.terms() {
                            h.push(format!("{k} {j} {row} {col} {v:e}"));
                        }
                        if e.constant_term() != 0.0 {
                            d.push(format!("{k} {row} {col} {:e}", e.constant_term()));
                        }
                    }
                }
            }
            let _ = writeln!(w, "HCOORD\n{}", h.len());
            for line in h {
                let _ = writeln!(w, "{line}");
            }
            let _ = writeln!(w);
            let _ = writeln!(w, "DCOORD\n{}", d.len());
            for line in d {
                let _ = writeln!(w, "{line}");
            }
        }
        out
    }
}
