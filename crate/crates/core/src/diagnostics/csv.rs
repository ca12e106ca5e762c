//! Versioned CSV tables. Each file starts with a `#schema=` line followed by
//! the header; floats use the shortest round-trip form so bodies are
//! byte-stable across runs.

use std::io::{self, Write};

use super::{ExplosionProfile, HessianSample, LayerReport};

pub const PROFILE_SCHEMA: &str = "gradflow.profile.v1";
pub const LAYERS_SCHEMA: &str = "gradflow.layers.v1";
pub const HESSIAN_SCHEMA: &str = "gradflow.hessian.v1";

pub const PROFILE_HEADER: &str = "layer,var_g,per_layer_ratio,cumulative_rate";
pub const LAYERS_HEADER: &str = "layer,step,var_x,var_g,var_w,mean_std_ratio,corr_xg,corr_xx";
pub const HESSIAN_HEADER: &str = "layer,grad_norm,hess_norm";

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_preamble(w: &mut impl Write, schema: &str, header: &str) -> io::Result<()> {
    writeln!(w, "#schema={schema}")?;
    writeln!(w, "{header}")
}

/// One row per boundary; `per_layer_ratio` is empty on the output row.
pub fn write_profile(w: &mut impl Write, p: &ExplosionProfile) -> io::Result<()> {
    write_preamble(w, PROFILE_SCHEMA, PROFILE_HEADER)?;
    for k in 0..p.var_g.len() {
        writeln!(
            w,
            "{},{},{},{}",
            k,
            fmt_f64(p.var_g[k]),
            fmt_opt(p.per_layer_ratio.get(k).copied()),
            fmt_f64(p.cumulative_rate[k])
        )?;
    }
    Ok(())
}

/// Body rows only, so a training log can append one block per logged step.
pub fn write_layer_rows(w: &mut impl Write, reports: &[LayerReport], step: usize) -> io::Result<()> {
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.layer_index,
            step,
            fmt_f64(r.var_x),
            fmt_f64(r.var_g),
            fmt_opt(r.var_w),
            fmt_opt(r.mean_std_ratio),
            fmt_opt(r.corr_xg),
            fmt_opt(r.corr_xx)
        )?;
    }
    Ok(())
}

pub fn write_layers(w: &mut impl Write, reports: &[LayerReport], step: usize) -> io::Result<()> {
    write_preamble(w, LAYERS_SCHEMA, LAYERS_HEADER)?;
    write_layer_rows(w, reports, step)
}

pub fn write_hessian(w: &mut impl Write, samples: &[HessianSample]) -> io::Result<()> {
    write_preamble(w, HESSIAN_SCHEMA, HESSIAN_HEADER)?;
    for s in samples {
        writeln!(w, "{},{},{}", s.layer_index, fmt_f64(s.grad_norm), fmt_f64(s.hess_norm))?;
    }
    Ok(())
}
