use pyo3::prelude::*;

#[pymodule]
fn akb_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
