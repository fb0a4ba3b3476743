//! Verify analytic gradients against central finite differences for a full
//! differential attention layer.
//!
//! ```bash
//! cargo run --release --example grad_check
//! ```

use diffclip::attention::{
    mha_stacked, AttentionConfig, AttentionVariant, AttentionVars, LambdaInitMode, LambdaVars,
};
use diffclip::gradcheck::check_gradients;
use diffclip::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (n, d, h) = (4usize, 8usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rt = |shape: &[usize]| {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()
    };

    let x = rt(&[n, d]);
    let params = vec![
        ("wq".to_string(), rt(&[d, d])),
        ("wk".to_string(), rt(&[d, d])),
        ("wv".to_string(), rt(&[d, d])),
        ("wo".to_string(), rt(&[d, d])),
        ("lq1".to_string(), rt(&[d / h / 2])),
        ("lk1".to_string(), rt(&[d / h / 2])),
        ("lq2".to_string(), rt(&[d / h / 2])),
        ("lk2".to_string(), rt(&[d / h / 2])),
    ];
    let cfg = AttentionConfig::new(d, h, AttentionVariant::Differential, LambdaInitMode::Constant(0.8), 1)?;

    let report = check_gradients(&params, 1e-5, |tape, vars| {
        let xv = tape.constant(x.clone());
        let w = AttentionVars {
            wq: vars[0],
            wk: vars[1],
            wv: vars[2],
            wo: vars[3],
            lambda: Some(LambdaVars {
                lq1: vars[4],
                lk1: vars[5],
                lq2: vars[6],
                lk2: vars[7],
                lambda_init: 0.8,
            }),
        };
        let out = mha_stacked(tape, xv, &w, &cfg, 1, n, false, None)?;
        tape.sum(out)
    })?;

    println!(
        "checked {} scalar parameters of a {n}-token, d={d}, {h}-head differential layer",
        report.checked
    );
    println!(
        "worst relative error {:.3e} at {}[{}]",
        report.max_rel_err, report.worst_param, report.worst_index
    );
    assert!(report.passes(1e-5));
    println!("analytic gradients match central finite differences (h = 1e-5)");
    Ok(())
}
