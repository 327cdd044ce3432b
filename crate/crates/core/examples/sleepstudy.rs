use lmmderiv::datasets::{sleepstudy, sleepstudy_spec};
use lmmderiv::{build_design, converge_report, fit, sandwich, vcov_full, FitOptions, InfoKind, Method, SandwichOptions};

fn main() -> lmmderiv::Result<()> {
    let spec = sleepstudy_spec();
    let design = build_design(&sleepstudy(&spec)?, &spec)?;
    for method in [Method::Ml, Method::Reml] {
        let model = fit(&design, &FitOptions::method(method))?;
        print!("{}", converge_report(&model));
        for (name, v) in model.params().names().iter().zip(model.params().to_vector().iter()) {
            println!("  {name:<30} {v:>14.6}");
        }
        println!("vcov (expected):{:.4}", vcov_full(&model, true, InfoKind::Expected)?.values);
        let sw = sandwich(&model, &SandwichOptions::default())?;
        println!("sandwich:{:.4}robust se:{:.4}", sw.vcov, sw.robust_se.transpose());
    }
    Ok(())
}
