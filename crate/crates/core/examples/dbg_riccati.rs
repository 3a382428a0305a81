use traction_mpc::riccati::*;
use traction_mpc::vehicle::*;

fn main() {
    let params = VehicleParams::heavy_truck();
    let cfg = LqtConfig::default();
    for &vx in &[6.0, 8.0, 10.0, 15.0] {
        for &mu in &[0.2, 0.5, 0.8] {
            let x = State { s: 0.0, d: 0.0, dpsi: 0.0, yaw_rate: 0.0, vx, vy: 0.0 };
            match lqt_gain(&x, &RoadPoint::flat(0.0), mu, &params, &cfg, 0.1) {
                Ok(g) => println!("vx={vx:5} mu={mu}: radius={:.6} residual={:.3e} |P|max={:.3e}", g.tracking_radius, g.residual, g.p.amax()),
                Err(e) => println!("vx={vx:5} mu={mu}: ERR {e}"),
            }
        }
    }
}
