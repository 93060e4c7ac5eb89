//! Compares analytic gradients with central finite differences for every
//! combination of classifier sharing, the two consistency losses and
//! class-agnostic attention.
//!
//! ```text
//! cargo run --release --example gradient_check [EPSILON]
//! ```

use ecm::training::check_flag_combinations;

fn main() -> ecm::Result<()> {
    let eps = std::env::args()
        .nth(1)
        .map_or(1e-5, |s| s.parse().expect("EPSILON"));
    println!("shared  c2c    a2c    agnostic  max_rel_error  worst tensor");
    let mut worst = 0.0f64;
    for check in check_flag_combinations(0, eps)? {
        let f = check.flags;
        let r = &check.report;
        println!(
            "{:<7} {:<6} {:<6} {:<9} {:<14.3e} {}[{}] ({} entries)",
            f.share_classifier,
            f.use_c2c,
            f.use_a2c,
            f.class_agnostic_weights,
            r.max_rel_error,
            r.worst_tensor,
            r.worst_index,
            r.checked
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("overall max relative error {worst:.3e}");
    Ok(())
}
