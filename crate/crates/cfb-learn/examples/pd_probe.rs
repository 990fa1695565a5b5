//! Physics sanity probe: a hand-written cascaded PD controller flying the
//! simulated quadcopter from delayed estimates. If this can hover and move
//! to setpoints, the dynamics/controllability chain is consistent.

use cfb_core::model::{arm_columns, hover_trim};
use cfb_core::rng::derive_rng;
use cfb_core::sim::{observe, step, SimConfig, StateRing};
use cfb_core::state::{MotorCommand, QuadState};
use cfb_core::ModelParams;
use nalgebra::Vector3;

fn main() {
    let params = ModelParams::cfb_guards();
    let cfg = SimConfig::default();
    let (omega_star, u_star) = hover_trim(&params).unwrap();
    let target = Vector3::new(0.0, 0.0, 1.5);

    let mut x = QuadState::hovering_at(Vector3::new(0.8, -0.5, 0.9), omega_star);
    let mut ring = StateRing::new(cfg.delay_steps(), x);
    let mut rng = derive_rng(0, "pd", 0);
    let offset = nalgebra::UnitQuaternion::identity();

    // Thrust-curve slope at trim, N per unit command (steady state).
    let sigma = params.sigma;
    let xstar = omega_star / sigma;
    let c = params.thrust_coeffs;
    let df_domega = (3.0 * c[0] * xstar * xstar + 2.0 * c[1] * xstar + c[2]) / sigma;
    let df_du = df_domega * params.motor_gain;
    let f_star = params.mass * params.gravity / 4.0;

    let arms = arm_columns(&params);
    let h2 = arms[0].norm_squared(); // 2 h^2 per motor, sum = 4 * 2h^2? -> AA^T diag = sum arm_x^2 = 4h^2
    let aat = 4.0 * (params.width / 2.0) * (params.width / 2.0);
    let _ = h2;

    let dt_ctrl = cfg.dt_control;
    let steps = (12.0 / dt_ctrl) as usize;
    let mut worst_after_5s = 0.0_f64;
    for k in 0..steps {
        let est = observe(&ring, &cfg, &offset).unwrap();
        let t = k as f64 * dt_ctrl;

        let a_des = (target - est.p) * 4.0 - est.v * 3.0;
        let f_vec = Vector3::new(
            a_des.x * params.mass,
            a_des.y * params.mass,
            (a_des.z + params.gravity) * params.mass,
        );
        let r = est.q.to_rotation_matrix();
        let f_body = r.transpose() * f_vec;
        let f_total = f_body.z.clamp(0.05, 4.0 * 0.28);

        // Reduced attitude: rotate body z onto the desired thrust direction.
        let z_des_body = r.transpose() * f_vec.normalize();
        let e_att = Vector3::new(-z_des_body.y, z_des_body.x, 0.0);
        let kp_att = 40.0;
        let kd_att = 8.0;
        let tau_des = Vector3::new(
            params.inertia.x * (kp_att * e_att.x - kd_att * est.w.x),
            params.inertia.y * (kp_att * e_att.y - kd_att * est.w.y),
            params.inertia.z * (-4.0 * est.w.z),
        );

        // Least-norm mixer for roll/pitch; yaw left to spin-sign asymmetry.
        let mut u = [0.0; 4];
        for i in 0..4 {
            let delta = (arms[i].x * tau_des.x + arms[i].y * tau_des.y) / aat;
            let f_i = f_total / 4.0 + delta;
            u[i] = (u_star + (f_i - f_star) / df_du).clamp(0.0, 1.0);
        }
        let cmd = MotorCommand::new(u);
        for _ in 0..cfg.control_substeps() {
            x = step(&x, &cmd, &params, &cfg, &mut rng).unwrap();
            ring.push(x);
        }
        if t >= 5.0 {
            worst_after_5s = worst_after_5s.max((x.p - target).norm());
        }
        if k % 125 == 0 {
            println!(
                "t {:5.2}  p ({:6.3} {:6.3} {:6.3})  |v| {:.3}  |w| {:.3}",
                t,
                x.p.x,
                x.p.y,
                x.p.z,
                x.v.norm(),
                x.w.norm()
            );
        }
    }
    println!("worst distance after 5 s: {:.4} m", worst_after_5s);
}
