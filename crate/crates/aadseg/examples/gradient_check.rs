//! Verify every adjoint against central finite differences.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use aadseg::gradcheck;

fn main() -> aadseg::Result<()> {
    for r in gradcheck::full_suite(1)? {
        println!(
            "{:<24} max_rel_err {:.3e}  [{}]",
            r.name,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
