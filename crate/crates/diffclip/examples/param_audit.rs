//! Count exactly how many parameters differential attention adds.
//!
//! ```bash
//! cargo run --release --example param_audit
//! ```

use diffclip::audit::{b16_shapes, param_audit, toy_shapes};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, shapes) in [("toy", toy_shapes()), ("b16", b16_shapes())] {
        let rep = param_audit(&shapes)?;
        println!("{name} shapes:");
        println!("  standard total:      {:>12}", rep.total_standard);
        println!("  differential total:  {:>12}", rep.total_differential);
        println!(
            "  extra lambda params: {:>12}  (vision {}, text {})",
            rep.extra, rep.vision_extra, rep.text_extra
        );
        println!("  closed-form check:   {:>12}", rep.closed_form_extra);
        println!("  overhead:            {:>15.6}%", rep.ratio_percent());
        println!();
    }
    Ok(())
}
