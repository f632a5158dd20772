use mixedray::cutoff::CutoffProfile;
use mixedray::symbols::*;
use nalgebra::DMatrix;
use num_complex::Complex64;

fn main() {
    let chi = CutoffProfile::default();
    let p = SymbolPoint { xi: 0.4, eta: vec![0.8, -0.3], h: 0.0, alpha: 0.5 };
    let mut prev: Option<DMatrix<Complex64>> = None;
    for ord in [64usize, 128, 256, 512, 1024, 2048] {
        let m = equatorial_integral(SymbolKind::T1Fiber, &p, &chi, ord)
            .unwrap()
            .matrix;
        if let Some(pm) = &prev {
            let rel = (&m - pm).norm() / m.norm();
            println!("order {ord:5}: doubling rel = {rel:.3e}");
        }
        prev = Some(m);
    }
}
