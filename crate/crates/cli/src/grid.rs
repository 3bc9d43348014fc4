//! `start:stop:step` grids (inclusive end), comma lists, or a single value.

use nsb_core::Error;

fn bad(spec: &str, why: &str) -> Error {
    Error::InvalidParameter {
        name: "grid",
        reason: format!("`{spec}`: {why}"),
    }
}

fn num(spec: &str, s: &str) -> Result<f64, Error> {
    let v: f64 = s.trim().parse().map_err(|_| bad(spec, &format!("`{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(bad(spec, "values must be finite"));
    }
    Ok(v)
}

pub fn parse_grid(spec: &str) -> Result<Vec<f64>, Error> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [one] => one.split(',').map(|s| num(spec, s)).collect(),
        [a, b, s] => {
            let (a, b, s) = (num(spec, a)?, num(spec, b)?, num(spec, s)?);
            if !(s > 0.0) {
                return Err(bad(spec, "step must be positive"));
            }
            if b < a {
                return Err(bad(spec, "stop is below start"));
            }
            let steps = ((b - a) / s + 1e-9).floor() as usize;
            if steps > 10_000_000 {
                return Err(bad(spec, "grid has too many points"));
            }
            Ok((0..=steps).map(|i| a + i as f64 * s).collect())
        }
        _ => Err(bad(spec, "expected start:stop:step, a comma list or a number")),
    }
}
