use std::time::Instant;
use tracto::chart::{ChartConnection, Domain, klein_levi_civita};
use tracto::solver::{transport_matrix, CurvePath, OdeOpts};

fn main() {
    for n in [2usize, 3] {
        let c = ChartConnection::flat(n, Domain::symmetric(1.5, n));
        let path = CurvePath::line(&vec![0.0; n], &vec![1.0; n]);
        let opts = OdeOpts { richardson: false, ..Default::default() };
        let t = Instant::now();
        let _ = transport_matrix(&c, &path, &opts).unwrap();
        let steps = (path.length() / opts.step).ceil();
        println!("flat n={n}: {:?} per {} steps = {:.2} us/step", t.elapsed(), steps, t.elapsed().as_micros() as f64 / steps);
    }
    let m = klein_levi_civita(2).unwrap();
    let path = CurvePath::line(&[0.0, 0.0], &[0.5, 0.3]);
    let opts = OdeOpts { richardson: false, ..Default::default() };
    let t = Instant::now();
    let _ = transport_matrix(&m.chart, &path, &opts).unwrap();
    let steps = (path.length() / opts.step).ceil();
    println!("klein n=2: {:?} per {} steps = {:.2} us/step", t.elapsed(), steps, t.elapsed().as_micros() as f64 / steps);
}
