//! The lambda reparameterization and its per-layer initialization schedule.
//!
//! ```bash
//! cargo run --release --example lambda_schedule
//! ```

use diffclip::attention::{compute_lambda, lambda_init_schedule, LambdaParams};
use diffclip::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("dynamic schedule 0.8 - 0.6 exp(-0.3 l):");
    for l in 1..=12 {
        println!("  layer {l:>2}: lambda_init = {:.5}", lambda_init_schedule(l)?);
    }
    println!("  (approaches 0.8 for deep layers: l=100 -> {:.10})", lambda_init_schedule(100)?);

    // At initialization the four lambda vectors are zero, so lambda equals
    // lambda_init exactly: exp(0) - exp(0) + init.
    let at_init = LambdaParams::zeros(8, 0.8);
    println!("\nlambda at zero vectors: {}", compute_lambda(&at_init)?);

    // Training moves the vectors; lambda follows the dot products.
    let mut trained = LambdaParams::zeros(2, 0.8);
    trained.lq1 = Tensor::new(&[2], vec![0.5, 0.3])?;
    trained.lk1 = Tensor::new(&[2], vec![0.4, 0.2])?;
    trained.lq2 = Tensor::new(&[2], vec![0.1, -0.2])?;
    trained.lk2 = Tensor::new(&[2], vec![0.3, 0.1])?;
    println!("lambda after a hypothetical update: {:.5}", compute_lambda(&trained)?);
    Ok(())
}
