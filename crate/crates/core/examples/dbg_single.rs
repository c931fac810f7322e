use pivrec::energy::residuals_t0;
use pivrec::geometry::Box3;
use pivrec::pipeline::{reconstruct, SolverConfig};
use pivrec::scene::BlobKernel;
use pivrec::synth::{self, AnalyticFlow};
use pivrec::triangulate::{detect_peaks, propose, ProposalParams};

fn main() {
    let omega = Box3::from_dims(32.0, 32.0, 16.0);
    let flow = AnalyticFlow::Uniform { d: [1.5, -0.5, 0.5] };
    let scene = synth::generate(&flow, 1.0 / (64.0 * 64.0), 64, 64, &omega, 1.0, 0.0, 43);
    println!("true: {:?} c={}", scene.particles_t0.positions[0].transpose(), scene.particles_t0.intensities[0]);
    // run one coarse level only
    let config = SolverConfig { pyramid_levels: 1, max_inner_iterations: 25, sigma_final: 1.36, epsilon_start: 0.8, epsilon_end: 0.8, output_spacing: Some(4.0), ..Default::default() };
    let rec = reconstruct(&scene.images, &scene.cameras, &omega, &config).unwrap();
    for i in 0..rec.particles.len() {
        println!("after L0: {:?} c={:.4}", rec.particles.positions[i].transpose(), rec.particles.intensities[i]);
    }
    // now propose at sigma 1.28 with those particles
    let kernel = BlobKernel::new(1.28);
    let residuals = residuals_t0(&rec.particles, &scene.cameras, &scene.images, &kernel).unwrap();
    let peaks = detect_peaks(&residuals[0], 0.2);
    for p in &peaks { println!("residual peak at {:?} I={:.3}", p.position.transpose(), p.intensity); }
    let cands = propose(&residuals, &scene.cameras, &omega,
        &ProposalParams { epsilon: 1.04, i_min: 0.2, ..Default::default() }, &rec.particles);
    for c in &cands {
        let d = (c.position - rec.particles.positions[0]).norm();
        println!("candidate {:?} c={:.3} err={:.4} dist_to_existing={:.4}", c.position.transpose(), c.intensity, c.error, d);
    }
}
