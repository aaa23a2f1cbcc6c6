// Builds a small log-space expression on the tape and reads back its
// value and parameter gradients.

use clickgrad::autodiff::Tape;
use clickgrad::logspace::{log_sum_exp, sigmoid};
use clickgrad::params::ParameterStore;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut store = ParameterStore::new();
    let a = store.add_scalar("a", 0.5)?;
    let b = store.add_scalar("b", -1.0)?;

    // log(sigmoid(a) + sigmoid(a) * (1 - sigmoid(b)))
    let mut tape = Tape::new();
    let la = store.leaf(&mut tape, a);
    let lb = store.leaf(&mut tape, b);
    let first = tape.log_sigmoid(la);
    let miss = tape.log1m_sigmoid(lb);
    let second = tape.add2(first, miss);
    let out = tape.log_sum_exp(&[first, second]);
    let grads = tape.backward(out)?;

    let (pa, pb) = (sigmoid(0.5), sigmoid(-1.0));
    println!("value {:.6} (direct {:.6})", tape.value(out), log_sum_exp(&[pa.ln(), (pa * (1.0 - pb)).ln()])?);
    println!("d/da {:.6}  d/db {:.6}", grads.get(a), grads.get(b));
    println!("{} nodes on the tape", tape.len());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
