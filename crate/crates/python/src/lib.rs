//! Python bindings (placeholder while the core crate stabilizes).

use pyo3::prelude::*;

#[pymodule]
fn sfgen_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
