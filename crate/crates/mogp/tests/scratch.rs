mod common;

use common::*;
use mogp::classify::evaluate;
use mogp::data::synth_generate;
use mogp::likelihood::log_marginal_sum;
use mogp::model::Approx;
use mogp::train::{fit_generative, init_hyperparams};

#[test]
#[ignore]
fn diagnose_seed_11() {
    let seed = 11u64;
    let train = synth_generate(&task_spec(seed, 20, None)).unwrap();
    let test = synth_generate(&task_spec(seed.wrapping_add(1000), 100, None)).unwrap();
    let kernel = train_kernel();
    let spec = task_spec(seed, 20, None);

    for (c, class) in train.classes.iter().enumerate() {
        let init = init_hyperparams(&class.instances, &kernel, seed.wrapping_add(c as u64), None).unwrap();
        let true_theta = &spec.per_class[c];
        let ll_true = log_marginal_sum(&class.instances, true_theta, &kernel, Approx::Exact).unwrap();
        let ll_init = log_marginal_sum(&class.instances, &init, &kernel, Approx::Exact).unwrap();
        let (fitted, report) =
            fit_generative(&class.instances, &kernel, &init, &gen_opt(), Approx::Exact, false).unwrap();
        let ll_fit = log_marginal_sum(&class.instances, &fitted, &kernel, Approx::Exact).unwrap();
        println!("== class {c} ({})", class.name);
        println!("  ll true={ll_true:.2} init={ll_init:.2} fitted={ll_fit:.2}");
        println!("  iters={} converged={} trace_first={:.2} trace_last={:.2}",
            report.iterations, report.converged,
            report.objective_trace.first().unwrap(), report.objective_trace.last().unwrap());
        println!("  init  latent={:?} output={:?} mixing={:?} noise={:?}",
            init.latent_log_precisions[0].as_slice(),
            init.output_log_precisions.iter().map(|v| v[0]).collect::<Vec<_>>(),
            init.mixing.as_slice(), init.log_noise_vars.as_slice());
        println!("  fit   latent={:?} output={:?} mixing={:?} noise={:?}",
            fitted.latent_log_precisions[0].as_slice(),
            fitted.output_log_precisions.iter().map(|v| v[0]).collect::<Vec<_>>(),
            fitted.mixing.as_slice(), fitted.log_noise_vars.as_slice());
        println!("  true  latent={:?} output={:?} mixing={:?} noise={:?}",
            true_theta.latent_log_precisions[0].as_slice(),
            true_theta.output_log_precisions.iter().map(|v| v[0]).collect::<Vec<_>>(),
            true_theta.mixing.as_slice(), true_theta.log_noise_vars.as_slice());
    }

    let mut traces = Vec::new();
    let gen = train_generative(&train, kernel, seed, &mut traces, "dbg");
    let acc = evaluate(&gen, &test).unwrap();
    println!("gen accuracy {:.3} confusion {:?}", acc.accuracy, acc.confusion);
}
