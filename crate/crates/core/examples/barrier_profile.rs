//! Shape of the softplus barrier for a few sharpness values: the measured
//! barrier is pushed toward 0, which is cheap while `g < 0` and grows about
//! linearly once the constraint is violated.
//!
//! cargo run --example barrier_profile

use enkmp::constraints::softplus;

fn main() {
    let betas = [1.0, 5.0, 10.0, 20.0];
    print!("      g");
    for b in betas {
        print!("   beta={b:<5}");
    }
    println!();
    for i in -10..=10 {
        let g = i as f64 * 0.2;
        print!("{g:7.2}");
        for b in betas {
            print!(" {:11.5}", softplus(g, 1.0, b));
        }
        println!();
    }
}
