//! Simulate trajectories, fit the behavioral policy, then fit a
//! KL-constrained suggested policy and compare their estimated values.
//!
//! cargo run --example simulate_and_fit -- [n] [gamma]

use relsparse::value::value_of;
use relsparse::{fit_mle, fit_trpo, gen_dataset, kl_n, ActiveMask, MaskedPolicy, SimConfig};

fn main() -> relsparse::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(1000, |s| s.parse().expect("n"));
    let gamma: f64 = args.next().map_or(3.0, |s| s.parse().expect("gamma"));

    let d = gen_dataset(&SimConfig::standard(n, 1))?;
    let beh = fit_mle(&d)?;
    let b = &beh.b_n;
    let se = beh.standard_errors();
    println!("behavioral fit after {} Newton steps", beh.iterations);
    for (j, c) in b.as_slice().iter().enumerate() {
        println!("  b_{} = {c:+.4}  (se {:.4})", j + 1, se[j]);
    }

    let fit = fit_trpo(b, &d, gamma, &ActiveMask::all(d.dim()))?;
    let p = fit.policy(b);
    println!("suggested policy, gamma = {gamma}: {:?}", fit.beta.as_slice());
    println!("  objective {:.4}, KL {:.4}, converged {}", fit.objective, kl_n(&p, b, &d)?, fit.converged);

    let v_beh = value_of(&MaskedPolicy::behavioral(b), b, &d)?;
    let v_sug = value_of(&p, b, &d)?;
    println!("value: behavioral {:.4} (se {:.4}), suggested {:.4} (se {:.4})", v_beh.v_weighted, v_beh.se(), v_sug.v_weighted, v_sug.se());
    Ok(())
}
